use std::cell::RefCell;
use std::rc::Rc;

use super::element::Element;
use super::tensor::Tensor;

/// Named, shared handle to a model tensor.
///
/// Trainable parameters hold a `requires_grad` leaf that the optimizer
/// replaces after each step; buffers (batch-norm running statistics) hold
/// constants updated by the owning layer.
pub struct Param<T: Element> {
    name: Rc<str>,
    value: Rc<RefCell<Tensor<T>>>,
    trainable: bool,
}

impl<T: Element> Clone for Param<T> {
    fn clone(&self) -> Self {
        Self {
            name: Rc::clone(&self.name),
            value: Rc::clone(&self.value),
            trainable: self.trainable,
        }
    }
}

impl<T: Element> std::fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Param")
            .field("name", &&*self.name)
            .field("shape", &self.shape())
            .field("trainable", &self.trainable)
            .finish()
    }
}

impl<T: Element> Param<T> {
    pub fn new(name: impl Into<String>, data: Vec<T>, shape: &[usize]) -> Self {
        let t = Tensor::from_vec(data, shape).expect("parameter shape").into_leaf(true);
        Self {
            name: Rc::from(name.into()),
            value: Rc::new(RefCell::new(t)),
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, data: Vec<T>, shape: &[usize]) -> Self {
        let t = Tensor::from_vec(data, shape).expect("buffer shape");
        Self {
            name: Rc::from(name.into()),
            value: Rc::new(RefCell::new(t)),
            trainable: false,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Current value; for trainable params this is the graph leaf.
    pub fn get(&self) -> Tensor<T> {
        self.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value.borrow().numel()
    }

    /// Replaces the stored values, keeping shape and trainability.
    pub fn set_data(&self, data: Vec<T>) {
        let shape = self.shape();
        assert_eq!(data.len(), shape.iter().product::<usize>(), "{}: size mismatch", self.name);
        let t = Tensor::from_vec(data, &shape).expect("same shape").into_leaf(self.trainable);
        *self.value.borrow_mut() = t;
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.value.borrow().grad()
    }

    pub fn zero_grad(&self) {
        self.value.borrow().zero_grad();
    }

    pub(crate) fn scale_grad(&self, s: T) {
        self.value.borrow().scale_grad(s);
    }
}

impl<T: Element> Tensor<T> {
    pub(crate) fn scale_grad(&self, s: T) {
        if let Some(g) = self.grad_slot().borrow_mut().as_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Global L2 norm over the accumulated gradients of `params`.
pub fn grad_norm<T: Element>(params: &[Param<T>]) -> f64 {
    params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.into_iter().map(|v| v.as_f64() * v.as_f64()))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Element>(params: &[Param<T>], max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm.is_finite() && norm > max_norm && max_norm > 0.0 {
        let s = T::from_f64(max_norm / norm);
        params.iter().for_each(|p| p.scale_grad(s));
    }
    norm
}
