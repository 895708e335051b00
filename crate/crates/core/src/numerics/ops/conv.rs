//! 2-D convolution, transposed convolution and depthwise 1-D convolution.
//!
//! Layout is `(batch, channel, time, freq)` for the 2-D ops and
//! `(batch, channel, time)` for the depthwise op. Strides and paddings are
//! given as `(time, freq)` pairs.

use crate::numerics::element::{gemm_slices, Element};
use crate::numerics::tensor::{invalid, BackwardOp, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dGeometry {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), padding: (usize, usize)) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// Output size of a forward convolution, `None` if the kernel does not fit.
    pub fn conv_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding.0;
        let pw = w + 2 * self.padding.1;
        if ph < self.kernel.0 || pw < self.kernel.1 {
            return None;
        }
        Some((
            (ph - self.kernel.0) / self.stride.0 + 1,
            (pw - self.kernel.1) / self.stride.1 + 1,
        ))
    }

    /// Output size of a transposed convolution.
    pub fn transpose_out(&self, h: usize, w: usize, output_padding: (usize, usize)) -> Option<(usize, usize)> {
        let oh = ((h - 1) * self.stride.0 + self.kernel.0 + output_padding.0).checked_sub(2 * self.padding.0)?;
        let ow = ((w - 1) * self.stride.1 + self.kernel.1 + output_padding.1).checked_sub(2 * self.padding.1)?;
        Some((oh, ow))
    }
}

/// Unfolds one `(c, h, w)` image into a `(c*kh*kw, oh*ow)` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(img: &[T], c: usize, h: usize, w: usize, g: &Conv2dGeometry, oh: usize, ow: usize, cols: &mut [T]) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let n = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * n;
                for oi in 0..oh {
                    let ii = (oi * sh + ki) as isize - ph as isize;
                    let dst = &mut cols[row + oi * ow..row + (oi + 1) * ow];
                    if ii < 0 || ii >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &img[(ci * h + ii as usize) * w..(ci * h + ii as usize + 1) * w];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * sw + kj) as isize - pw as isize;
                        *d = if jj < 0 || jj >= w as isize { T::zero() } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into the image.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Element>(cols: &[T], c: usize, h: usize, w: usize, g: &Conv2dGeometry, oh: usize, ow: usize, img: &mut [T]) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let n = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * n;
                for oi in 0..oh {
                    let ii = (oi * sh + ki) as isize - ph as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = &mut img[(ci * h + ii as usize) * w..(ci * h + ii as usize + 1) * w];
                    let src = &cols[row + oi * ow..row + (oi + 1) * ow];
                    for (oj, &s) in src.iter().enumerate() {
                        let jj = (oj * sw + kj) as isize - pw as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[jj as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dOp {
    geom: Conv2dGeometry,
    out_hw: (usize, usize),
}

impl<T: Element> BackwardOp<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[Tensor<T>], _y: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let (x, w) = (&inputs[0], &inputs[1]);
        let (batch, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let cout = w.dim(0);
        let (oh, ow) = self.out_hw;
        let kk = cin * self.geom.kernel.0 * self.geom.kernel.1;
        let n = oh * ow;
        let mut gx = x.requires_grad().then(|| vec![T::zero(); x.numel()]);
        let mut gw = w.requires_grad().then(|| vec![T::zero(); w.numel()]);
        let mut cols = vec![T::zero(); kk * n];
        for b in 0..batch {
            let gb = &g[b * cout * n..(b + 1) * cout * n];
            if let Some(gw) = gw.as_mut() {
                im2col(&x.data()[b * cin * h * wd..(b + 1) * cin * h * wd], cin, h, wd, &self.geom, oh, ow, &mut cols);
                gemm_slices(cout, n, kk, gb, false, &cols, true, gw, true);
            }
            if let Some(gx) = gx.as_mut() {
                gemm_slices(kk, cout, n, w.data(), true, gb, false, &mut cols, false);
                col2im(&cols, cin, h, wd, &self.geom, oh, ow, &mut gx[b * cin * h * wd..(b + 1) * cin * h * wd]);
            }
        }
        let gbias = inputs.get(2).filter(|t| t.requires_grad()).map(|_| bias_grad(g, batch, cout, n));
        let mut out = vec![gx, gw];
        if inputs.len() > 2 {
            out.push(gbias);
        }
        out
    }
}

fn bias_grad<T: Element>(g: &[T], batch: usize, c: usize, n: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); c];
    for b in 0..batch {
        for (ci, acc) in gb.iter_mut().enumerate() {
            let s: T = g[(b * c + ci) * n..(b * c + ci + 1) * n].iter().copied().sum();
            *acc += s;
        }
    }
    gb
}

fn add_bias<T: Element>(out: &mut [T], bias: &[T], batch: usize, n: usize) {
    let c = bias.len();
    for b in 0..batch {
        for (ci, &bv) in bias.iter().enumerate() {
            out[(b * c + ci) * n..(b * c + ci + 1) * n].iter_mut().for_each(|v| *v += bv);
        }
    }
}

struct ConvTranspose2dOp {
    geom: Conv2dGeometry,
    out_hw: (usize, usize),
}

impl<T: Element> BackwardOp<T> for ConvTranspose2dOp {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }

    fn backward(&self, inputs: &[Tensor<T>], y: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let (x, w) = (&inputs[0], &inputs[1]);
        let (batch, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let cout = w.dim(1);
        let (oh, ow) = self.out_hw;
        let out_n = oh * ow;
        debug_assert_eq!(y.len(), batch * cout * out_n);
        let kk = cout * self.geom.kernel.0 * self.geom.kernel.1;
        let n = h * wd;
        let mut gx = x.requires_grad().then(|| vec![T::zero(); x.numel()]);
        let mut gw = w.requires_grad().then(|| vec![T::zero(); w.numel()]);
        let mut cols = vec![T::zero(); kk * n];
        for b in 0..batch {
            im2col(&g[b * cout * out_n..(b + 1) * cout * out_n], cout, oh, ow, &self.geom, h, wd, &mut cols);
            let xb = &x.data()[b * cin * n..(b + 1) * cin * n];
            if let Some(gx) = gx.as_mut() {
                gemm_slices(cin, kk, n, w.data(), false, &cols, false, &mut gx[b * cin * n..(b + 1) * cin * n], false);
            }
            if let Some(gw) = gw.as_mut() {
                gemm_slices(cin, n, kk, xb, false, &cols, true, gw, true);
            }
        }
        let gbias = inputs
            .get(2)
            .filter(|t| t.requires_grad())
            .map(|_| bias_grad(g, batch, cout, out_n));
        let mut out = vec![gx, gw];
        if inputs.len() > 2 {
            out.push(gbias);
        }
        out
    }
}

struct DepthwiseConv1dOp {
    padding: usize,
}

impl<T: Element> BackwardOp<T> for DepthwiseConv1dOp {
    fn name(&self) -> &'static str {
        "depthwise_conv1d"
    }

    fn backward(&self, inputs: &[Tensor<T>], _y: &[T], g: &[T]) -> Vec<Option<Vec<T>>> {
        let (x, w) = (&inputs[0], &inputs[1]);
        let (batch, c, t) = (x.dim(0), x.dim(1), x.dim(2));
        let k = w.dim(1);
        let p = self.padding as isize;
        let mut gx = x.requires_grad().then(|| vec![T::zero(); x.numel()]);
        let mut gw = w.requires_grad().then(|| vec![T::zero(); w.numel()]);
        for b in 0..batch {
            for ci in 0..c {
                let base = (b * c + ci) * t;
                let xr = &x.data()[base..base + t];
                let gr = &g[base..base + t];
                let wr = &w.data()[ci * k..(ci + 1) * k];
                for ti in 0..t {
                    let go = gr[ti];
                    for (kj, &wv) in wr.iter().enumerate() {
                        let src = ti as isize + kj as isize - p;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        if let Some(gx) = gx.as_mut() {
                            gx[base + src as usize] += go * wv;
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[ci * k + kj] += go * xr[src as usize];
                        }
                    }
                }
            }
        }
        let gbias = inputs.get(2).filter(|t| t.requires_grad()).map(|_| bias_grad(g, batch, c, t));
        let mut out = vec![gx, gw];
        if inputs.len() > 2 {
            out.push(gbias);
        }
        out
    }
}

fn check_bias<T: Element>(op: &'static str, bias: Option<&Tensor<T>>, c: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: vec![c],
                rhs: b.shape().to_vec(),
            });
        }
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    /// Cross-correlation of `(B, Cin, H, W)` with weights `(Cout, Cin, kh, kw)`.
    pub fn conv2d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, geom: Conv2dGeometry) -> Result<Tensor<T>> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: self.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        };
        if self.rank() != 4 || weight.rank() != 4 || weight.dim(1) != self.dim(1) || (weight.dim(2), weight.dim(3)) != geom.kernel {
            return Err(mismatch());
        }
        check_bias("conv2d", bias, weight.dim(0))?;
        let (batch, cin, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let cout = weight.dim(0);
        let (oh, ow) = geom
            .conv_out(h, w)
            .ok_or_else(|| invalid("conv2d", format!("kernel {:?} does not fit input {:?}", geom.kernel, self.shape())))?;
        let kk = cin * geom.kernel.0 * geom.kernel.1;
        let n = oh * ow;
        let mut cols = vec![T::zero(); kk * n];
        let mut out = vec![T::zero(); batch * cout * n];
        for b in 0..batch {
            im2col(&self.data()[b * cin * h * w..(b + 1) * cin * h * w], cin, h, w, &geom, oh, ow, &mut cols);
            gemm_slices(cout, kk, n, weight.data(), false, &cols, false, &mut out[b * cout * n..(b + 1) * cout * n], false);
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(bias) = bias {
            add_bias(&mut out, bias.data(), batch, n);
            inputs.push(bias.clone());
        }
        Ok(Tensor::from_op(
            out,
            vec![batch, cout, oh, ow],
            inputs,
            Conv2dOp { geom, out_hw: (oh, ow) },
        ))
    }

    /// Transposed convolution of `(B, Cin, H, W)` with weights
    /// `(Cin, Cout, kh, kw)`; the exact adjoint of [`Tensor::conv2d`] plus
    /// `output_padding` extra rows/columns at the far edge.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        geom: Conv2dGeometry,
        output_padding: (usize, usize),
    ) -> Result<Tensor<T>> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv_transpose2d",
            lhs: self.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        };
        if self.rank() != 4 || weight.rank() != 4 || weight.dim(0) != self.dim(1) || (weight.dim(2), weight.dim(3)) != geom.kernel {
            return Err(mismatch());
        }
        if output_padding.0 >= geom.stride.0 || output_padding.1 >= geom.stride.1 {
            return Err(invalid("conv_transpose2d", format!("output padding {output_padding:?} must be below stride {:?}", geom.stride)));
        }
        check_bias("conv_transpose2d", bias, weight.dim(1))?;
        let (batch, cin, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let cout = weight.dim(1);
        let (oh, ow) = geom
            .transpose_out(h, w, output_padding)
            .ok_or_else(|| invalid("conv_transpose2d", "padding exceeds output size"))?;
        if geom.conv_out(oh, ow) != Some((h, w)) {
            return Err(invalid("conv_transpose2d", format!("inconsistent geometry for {:?} -> ({oh}, {ow})", self.shape())));
        }
        let kk = cout * geom.kernel.0 * geom.kernel.1;
        let n = h * w;
        let out_n = oh * ow;
        let mut cols = vec![T::zero(); kk * n];
        let mut out = vec![T::zero(); batch * cout * out_n];
        for b in 0..batch {
            gemm_slices(kk, cin, n, weight.data(), true, &self.data()[b * cin * n..(b + 1) * cin * n], false, &mut cols, false);
            col2im(&cols, cout, oh, ow, &geom, h, w, &mut out[b * cout * out_n..(b + 1) * cout * out_n]);
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(bias) = bias {
            add_bias(&mut out, bias.data(), batch, out_n);
            inputs.push(bias.clone());
        }
        Ok(Tensor::from_op(
            out,
            vec![batch, cout, oh, ow],
            inputs,
            ConvTranspose2dOp { geom, out_hw: (oh, ow) },
        ))
    }

    /// Per-channel 1-D convolution over time: `(B, C, T)` with `(C, K)`
    /// weights, stride 1, symmetric zero padding.
    pub fn depthwise_conv1d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, padding: usize) -> Result<Tensor<T>> {
        if self.rank() != 3 || weight.rank() != 2 || weight.dim(0) != self.dim(1) || weight.dim(1) != 2 * padding + 1 {
            return Err(TensorError::ShapeMismatch {
                op: "depthwise_conv1d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        let (batch, c, t) = (self.dim(0), self.dim(1), self.dim(2));
        check_bias("depthwise_conv1d", bias, c)?;
        let k = weight.dim(1);
        let p = padding as isize;
        let mut out = vec![T::zero(); self.numel()];
        for b in 0..batch {
            for ci in 0..c {
                let base = (b * c + ci) * t;
                let xr = &self.data()[base..base + t];
                let wr = &weight.data()[ci * k..(ci + 1) * k];
                for ti in 0..t {
                    let mut acc = T::zero();
                    for (kj, &wv) in wr.iter().enumerate() {
                        let src = ti as isize + kj as isize - p;
                        if src >= 0 && src < t as isize {
                            acc += wv * xr[src as usize];
                        }
                    }
                    out[base + ti] = acc;
                }
            }
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(bias) = bias {
            add_bias(&mut out, bias.data(), batch, t);
            inputs.push(bias.clone());
        }
        Ok(Tensor::from_op(
            out,
            vec![batch, c, t],
            inputs,
            DepthwiseConv1dOp { padding },
        ))
    }
}
