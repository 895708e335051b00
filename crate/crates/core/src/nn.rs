//! Layers shared by the MCG front-end and the Conformer.

use crate::numerics::element::{el, Element};
use crate::numerics::ops::Conv2dGeometry;
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Result;
use crate::numerics::{Param, Tensor};

/// Per-forward switches: batch-norm mode, whether running statistics may be
/// updated, and the generator used by dropout.
pub struct Ctx<'a> {
    pub train: bool,
    pub update_stats: bool,
    pub rng: Option<&'a mut Rng>,
}

impl<'a> Ctx<'a> {
    pub fn train(rng: &'a mut Rng) -> Self {
        Self {
            train: true,
            update_stats: true,
            rng: Some(rng),
        }
    }

    /// Training-mode statistics without touching running buffers.
    pub fn train_frozen_stats(rng: &'a mut Rng) -> Self {
        Self {
            train: true,
            update_stats: false,
            rng: Some(rng),
        }
    }

    pub fn eval() -> Self {
        Self {
            train: false,
            update_stats: false,
            rng: None,
        }
    }
}

/// Anything that owns parameters or buffers.
pub trait Module<T: Element> {
    fn collect(&self, out: &mut Vec<Param<T>>);

    /// Parameters and buffers, in a stable order.
    fn params(&self) -> Vec<Param<T>> {
        let mut v = Vec::new();
        self.collect(&mut v);
        v
    }

    fn trainable_params(&self) -> Vec<Param<T>> {
        self.params().into_iter().filter(|p| p.trainable()).collect()
    }
}

fn uniform<T: Element>(rng: &mut Rng, n: usize, bound: f64) -> Vec<T> {
    (0..n).map(|_| el(rng.uniform_range(-bound, bound))).collect()
}

pub struct Linear<T: Element> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Element> Linear<T> {
    /// Weight `(in, out)`, uniform in `±1/sqrt(in)`.
    pub fn new(name: &str, input: usize, output: usize, bias: bool, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: Param::new(format!("{name}/weight"), uniform(rng, input * output, bound), &[input, output]),
            bias: bias.then(|| Param::new(format!("{name}/bias"), vec![T::zero(); output], &[output])),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(&self.weight.get())?;
        match &self.bias {
            Some(b) => y.add(&b.get()),
            None => Ok(y),
        }
    }
}

impl<T: Element> Module<T> for Linear<T> {
    fn collect(&self, out: &mut Vec<Param<T>>) {
        out.push(self.weight.clone());
        out.extend(self.bias.clone());
    }
}

pub struct Conv2d<T: Element> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub geom: Conv2dGeometry,
}

impl<T: Element> Conv2d<T> {
    /// Kaiming-uniform weights `(cout, cin, kh, kw)`, zero bias.
    pub fn new(name: &str, cin: usize, cout: usize, geom: Conv2dGeometry, rng: &mut Rng) -> Self {
        let fan_in = cin * geom.kernel.0 * geom.kernel.1;
        let bound = (6.0 / fan_in as f64).sqrt();
        Self {
            weight: Param::new(
                format!("{name}/weight"),
                uniform(rng, cout * fan_in, bound),
                &[cout, cin, geom.kernel.0, geom.kernel.1],
            ),
            bias: Param::new(format!("{name}/bias"), vec![T::zero(); cout], &[cout]),
            geom,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight.get(), Some(&self.bias.get()), self.geom)
    }
}

impl<T: Element> Module<T> for Conv2d<T> {
    fn collect(&self, out: &mut Vec<Param<T>>) {
        out.push(self.weight.clone());
        out.push(self.bias.clone());
    }
}

pub struct ConvTranspose2d<T: Element> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub geom: Conv2dGeometry,
    pub output_padding: (usize, usize),
}

impl<T: Element> ConvTranspose2d<T> {
    /// Weights `(cin, cout, kh, kw)`.
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        geom: Conv2dGeometry,
        output_padding: (usize, usize),
        rng: &mut Rng,
    ) -> Self {
        let fan_in = cin * geom.kernel.0 * geom.kernel.1;
        let bound = (6.0 / fan_in as f64).sqrt();
        Self {
            weight: Param::new(
                format!("{name}/weight"),
                uniform(rng, cout * fan_in, bound),
                &[cin, cout, geom.kernel.0, geom.kernel.1],
            ),
            bias: Param::new(format!("{name}/bias"), vec![T::zero(); cout], &[cout]),
            geom,
            output_padding,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv_transpose2d(&self.weight.get(), Some(&self.bias.get()), self.geom, self.output_padding)
    }
}

impl<T: Element> Module<T> for ConvTranspose2d<T> {
    fn collect(&self, out: &mut Vec<Param<T>>) {
        out.push(self.weight.clone());
        out.push(self.bias.clone());
    }
}

/// Batch normalization over every axis except `axis`, with running
/// statistics for eval mode.
pub struct BatchNorm<T: Element> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub axis: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> BatchNorm<T> {
    pub fn new(name: &str, channels: usize, axis: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}/gamma"), vec![T::one(); channels], &[channels]),
            beta: Param::new(format!("{name}/beta"), vec![T::zero(); channels], &[channels]),
            running_mean: Param::buffer(format!("{name}/running_mean"), vec![T::zero(); channels], &[channels]),
            running_var: Param::buffer(format!("{name}/running_var"), vec![T::one(); channels], &[channels]),
            axis,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx) -> Result<Tensor<T>> {
        if ctx.train {
            let (y, stats) = x.batch_norm_train(&self.gamma.get(), &self.beta.get(), self.axis, self.eps)?;
            if ctx.update_stats {
                let m = el::<T>(self.momentum);
                let keep = T::one() - m;
                let unbias = if stats.count > 1 {
                    el::<T>(stats.count as f64 / (stats.count - 1) as f64)
                } else {
                    T::one()
                };
                let rm: Vec<T> = self.running_mean.get().data().iter().zip(&stats.mean).map(|(&r, &b)| keep * r + m * b).collect();
                let rv: Vec<T> = self
                    .running_var
                    .get()
                    .data()
                    .iter()
                    .zip(&stats.var)
                    .map(|(&r, &b)| keep * r + m * b * unbias)
                    .collect();
                self.running_mean.set_data(rm);
                self.running_var.set_data(rv);
            }
            Ok(y)
        } else {
            let c = self.gamma.numel();
            let mut view = vec![1; x.rank() - self.axis];
            view[0] = c;
            let inv: Vec<T> = self
                .running_var
                .get()
                .data()
                .iter()
                .map(|&v| T::one() / (v + el(self.eps)).sqrt())
                .collect();
            let inv = Tensor::from_vec(inv, &view)?;
            let mean = self.running_mean.get().reshape(&view)?;
            let scale = self.gamma.get().reshape(&view)?.mul(&inv)?;
            x.sub(&mean)?.mul(&scale)?.add(&self.beta.get().reshape(&view)?)
        }
    }
}

impl<T: Element> Module<T> for BatchNorm<T> {
    fn collect(&self, out: &mut Vec<Param<T>>) {
        out.extend([
            self.gamma.clone(),
            self.beta.clone(),
            self.running_mean.clone(),
            self.running_var.clone(),
        ]);
    }
}

pub struct LayerNorm<T: Element> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
}

impl<T: Element> LayerNorm<T> {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}/gamma"), vec![T::one(); dim], &[dim]),
            beta: Param::new(format!("{name}/beta"), vec![T::zero(); dim], &[dim]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gamma.get(), &self.beta.get(), self.eps)
    }
}

impl<T: Element> Module<T> for LayerNorm<T> {
    fn collect(&self, out: &mut Vec<Param<T>>) {
        out.push(self.gamma.clone());
        out.push(self.beta.clone());
    }
}

pub struct Prelu<T: Element> {
    pub alpha: Param<T>,
    pub axis: usize,
}

impl<T: Element> Prelu<T> {
    pub fn new(name: &str, channels: usize, axis: usize) -> Self {
        Self {
            alpha: Param::new(format!("{name}/alpha"), vec![el(0.25); channels], &[channels]),
            axis,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.prelu(&self.alpha.get(), self.axis)
    }
}

impl<T: Element> Module<T> for Prelu<T> {
    fn collect(&self, out: &mut Vec<Param<T>>) {
        out.push(self.alpha.clone());
    }
}

/// Unidirectional LSTM over `(batch, time, input)`, gate order i, f, g, o.
pub struct Lstm<T: Element> {
    pub w_ih: Param<T>,
    pub w_hh: Param<T>,
    pub bias: Param<T>,
    pub hidden: usize,
}

impl<T: Element> Lstm<T> {
    pub fn new(name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: Param::new(format!("{name}/w_ih"), uniform(rng, input * 4 * hidden, bound), &[input, 4 * hidden]),
            w_hh: Param::new(format!("{name}/w_hh"), uniform(rng, hidden * 4 * hidden, bound), &[hidden, 4 * hidden]),
            bias: Param::new(format!("{name}/bias"), uniform(rng, 4 * hidden, bound), &[4 * hidden]),
            hidden,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, t) = (x.dim(0), x.dim(1));
        let h_dim = self.hidden;
        let projected = x.matmul(&self.w_ih.get())?.add(&self.bias.get())?;
        let w_hh = self.w_hh.get();
        let mut h = Tensor::zeros(&[b, h_dim]);
        let mut c = Tensor::zeros(&[b, h_dim]);
        let mut outputs = Vec::with_capacity(t);
        for step in 0..t {
            let gates = projected.narrow(1, step, 1)?.reshape(&[b, 4 * h_dim])?.add(&h.matmul(&w_hh)?)?;
            let i = gates.narrow(1, 0, h_dim)?.sigmoid();
            let f = gates.narrow(1, h_dim, h_dim)?.sigmoid();
            let g = gates.narrow(1, 2 * h_dim, h_dim)?.tanh();
            let o = gates.narrow(1, 3 * h_dim, h_dim)?.sigmoid();
            c = f.mul(&c)?.add(&i.mul(&g)?)?;
            h = o.mul(&c.tanh())?;
            outputs.push(h.clone());
        }
        Tensor::stack(&outputs, 1)
    }
}

impl<T: Element> Module<T> for Lstm<T> {
    fn collect(&self, out: &mut Vec<Param<T>>) {
        out.extend([self.w_ih.clone(), self.w_hh.clone(), self.bias.clone()]);
    }
}

/// Inverted dropout; identity outside training or when `p == 0`.
pub fn dropout<T: Element>(x: &Tensor<T>, p: f64, ctx: &mut Ctx) -> Result<Tensor<T>> {
    if !ctx.train || p <= 0.0 {
        return Ok(x.clone());
    }
    let rng = ctx
        .rng
        .as_deref_mut()
        .ok_or_else(|| crate::numerics::tensor::invalid("dropout", "training-mode dropout needs an rng"))?;
    let keep = el::<T>(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.numel()).map(|_| if rng.uniform() < p { T::zero() } else { keep }).collect();
    x.mul(&Tensor::from_vec(mask, x.shape())?)
}

/// Sinusoidal absolute positional encodings `(t, d)`.
pub fn sinusoidal_positions<T: Element>(t: usize, d: usize) -> Tensor<T> {
    let mut pe = vec![T::zero(); t * d];
    for pos in 0..t {
        for i in 0..d / 2 {
            let freq = (-(2.0 * i as f64) * (10000f64).ln() / d as f64).exp();
            pe[pos * d + 2 * i] = el((pos as f64 * freq).sin());
            pe[pos * d + 2 * i + 1] = el((pos as f64 * freq).cos());
        }
    }
    Tensor::from_vec(pe, &[t, d]).expect("positional table")
}
