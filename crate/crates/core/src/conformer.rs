//! Conformer encoder with convolutional subsampling and a linear CTC head.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{dropout, sinusoidal_positions, BatchNorm, Conv2d, Ctx, LayerNorm, Linear, Module};
use crate::numerics::element::{el, Element};
use crate::numerics::ops::Conv2dGeometry;
use crate::numerics::rng::Rng;
use crate::numerics::tensor::{invalid, Result};
use crate::numerics::{Param, Tensor};

/// Shortest input the two stride-2 subsampling convolutions accept.
pub const MIN_FRAMES: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum ConformerConfigError {
    #[error("d_model {d_model} not divisible by {heads} heads")]
    Heads { d_model: usize, heads: usize },
    #[error("depthwise kernel {0} must be odd")]
    EvenKernel(usize),
    #[error("dropout {0} outside [0, 1)")]
    Dropout(f64),
    #[error("zero-sized dimension in configuration")]
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputNorm {
    #[default]
    BatchNorm,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConformerConfig {
    pub n_bins: usize,
    pub num_blocks: usize,
    pub d_model: usize,
    pub ffn_units: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub subsample_channels: usize,
    /// Number of non-blank tokens; the head emits `vocab_size + 1` logits.
    pub vocab_size: usize,
    pub dropout: f64,
    pub input_norm: InputNorm,
}

impl ConformerConfig {
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            n_bins: 80,
            num_blocks: 12,
            d_model: 256,
            ffn_units: 2048,
            heads: 4,
            conv_kernel: 15,
            subsample_channels: 256,
            vocab_size,
            dropout: 0.1,
            input_norm: InputNorm::BatchNorm,
        }
    }

    pub fn desk(vocab_size: usize) -> Self {
        Self {
            num_blocks: 2,
            d_model: 64,
            ffn_units: 128,
            subsample_channels: 16,
            dropout: 0.0,
            ..Self::paper(vocab_size)
        }
    }

    pub fn validate(&self) -> std::result::Result<(), ConformerConfigError> {
        let dims = [
            self.n_bins,
            self.num_blocks,
            self.d_model,
            self.ffn_units,
            self.heads,
            self.subsample_channels,
            self.vocab_size,
        ];
        if dims.contains(&0) {
            return Err(ConformerConfigError::Zero);
        }
        if self.d_model % self.heads != 0 {
            return Err(ConformerConfigError::Heads {
                d_model: self.d_model,
                heads: self.heads,
            });
        }
        if self.conv_kernel % 2 == 0 {
            return Err(ConformerConfigError::EvenKernel(self.conv_kernel));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ConformerConfigError::Dropout(self.dropout));
        }
        Ok(())
    }
}

/// Frames after subsampling: `ceil(ceil(t / 2) / 2)`.
pub fn subsampled_len(t: usize) -> usize {
    t.div_ceil(2).div_ceil(2)
}

/// `(B, T) -> (B, T, 1)` validity mask.
pub fn frame_mask<T: Element>(lengths: &[usize], frames: usize) -> Tensor<T> {
    let data = lengths
        .iter()
        .flat_map(|&l| (0..frames).map(move |t| if t < l { T::one() } else { T::zero() }))
        .collect();
    Tensor::from_vec(data, &[lengths.len(), frames, 1]).expect("mask shape")
}

pub struct Subsampling<T: Element> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub linear: Linear<T>,
}

impl<T: Element> Subsampling<T> {
    fn new(cfg: &ConformerConfig, rng: &mut Rng) -> Self {
        let g = Conv2dGeometry::new((3, 3), (2, 2), (1, 1));
        let c = cfg.subsample_channels;
        let q = cfg.n_bins.div_ceil(2).div_ceil(2);
        Self {
            conv1: Conv2d::new("asr/subsample/conv1", 1, c, g, rng),
            conv2: Conv2d::new("asr/subsample/conv2", c, c, g, rng),
            linear: Linear::new("asr/subsample/linear", c * q, cfg.d_model, true, rng),
        }
    }

    /// `(B, T, Q) -> (B, ceil(T/4), d_model)`.
    pub fn forward(&self, x: &Tensor<T>, p: f64, ctx: &mut Ctx) -> Result<Tensor<T>> {
        let (b, t, q) = (x.dim(0), x.dim(1), x.dim(2));
        if t < MIN_FRAMES {
            return Err(invalid(
                "subsample",
                format!("{t} frames, at least {MIN_FRAMES} are required"),
            ));
        }
        let h = self.conv1.forward(&x.reshape(&[b, 1, t, q])?)?.relu();
        let h = self.conv2.forward(&h)?.relu();
        let (c, t2, q2) = (h.dim(1), h.dim(2), h.dim(3));
        let flat = h.permute(&[0, 2, 1, 3])?.reshape(&[b, t2, c * q2])?;
        dropout(&self.linear.forward(&flat)?, p, ctx)
    }
}

impl<T: Element> Module<T> for Subsampling<T> {
    fn collect(&self, out: &mut Vec<Param<T>>) {
        self.conv1.collect(out);
        self.conv2.collect(out);
        self.linear.collect(out);
    }
}

pub struct FeedForward<T: Element> {
    pub norm: LayerNorm<T>,
    pub up: Linear<T>,
    pub down: Linear<T>,
}

impl<T: Element> FeedForward<T> {
    fn new(name: &str, d: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            norm: LayerNorm::new(&format!("{name}/norm"), d),
            up: Linear::new(&format!("{name}/up"), d, hidden, true, rng),
            down: Linear::new(&format!("{name}/down"), hidden, d, true, rng),
        }
    }

    fn forward(&self, x: &Tensor<T>, p: f64, ctx: &mut Ctx) -> Result<Tensor<T>> {
        let h = dropout(&self.up.forward(&self.norm.forward(x)?)?.swish(), p, ctx)?;
        dropout(&self.down.forward(&h)?, p, ctx)
    }
}

impl<T: Element> Module<T> for FeedForward<T> {
    fn collect(&self, out: &mut Vec<Param<T>>) {
        self.norm.collect(out);
        self.up.collect(out);
        self.down.collect(out);
    }
}

pub struct SelfAttention<T: Element> {
    pub norm: LayerNorm<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub out: Linear<T>,
    pub heads: usize,
}

impl<T: Element> SelfAttention<T> {
    fn new(name: &str, d: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            norm: LayerNorm::new(&format!("{name}/norm"), d),
            query: Linear::new(&format!("{name}/query"), d, d, true, rng),
            key: Linear::new(&format!("{name}/key"), d, d, true, rng),
            value: Linear::new(&format!("{name}/value"), d, d, true, rng),
            out: Linear::new(&format!("{name}/out"), d, d, true, rng),
            heads,
        }
    }

    /// Scaled dot-product attention; `key_bias` is `(B*heads, 1, T)` with
    /// large negative entries on padded keys.
    pub fn attend(&self, x: &Tensor<T>, key_bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let (b, t, d) = (x.dim(0), x.dim(1), x.dim(2));
        let (h, dk) = (self.heads, d / self.heads);
        let split = |z: Tensor<T>| -> Result<Tensor<T>> {
            z.reshape(&[b, t, h, dk])?.permute(&[0, 2, 1, 3])?.reshape(&[b * h, t, dk])
        };
        let q = split(self.query.forward(x)?)?;
        let k = split(self.key.forward(x)?)?;
        let v = split(self.value.forward(x)?)?;
        let mut scores = q.bmm(&k, true)?.mul_scalar(1.0 / (dk as f64).sqrt());
        if let Some(bias) = key_bias {
            scores = scores.add(bias)?;
        }
        let ctx = scores.softmax().bmm(&v, false)?;
        let merged = ctx.reshape(&[b, h, t, dk])?.permute(&[0, 2, 1, 3])?.reshape(&[b, t, d])?;
        self.out.forward(&merged)
    }

    fn forward(&self, x: &Tensor<T>, key_bias: Option<&Tensor<T>>, p: f64, ctx: &mut Ctx) -> Result<Tensor<T>> {
        dropout(&self.attend(&self.norm.forward(x)?, key_bias)?, p, ctx)
    }
}

impl<T: Element> Module<T> for SelfAttention<T> {
    fn collect(&self, out: &mut Vec<Param<T>>) {
        self.norm.collect(out);
        self.query.collect(out);
        self.key.collect(out);
        self.value.collect(out);
        self.out.collect(out);
    }
}

pub struct ConvModule<T: Element> {
    pub norm: LayerNorm<T>,
    pub pointwise_in: Linear<T>,
    pub depthwise: Param<T>,
    pub depthwise_bias: Param<T>,
    pub bn: BatchNorm<T>,
    pub pointwise_out: Linear<T>,
}

impl<T: Element> ConvModule<T> {
    fn new(name: &str, d: usize, kernel: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (kernel as f64).sqrt();
        Self {
            norm: LayerNorm::new(&format!("{name}/norm"), d),
            pointwise_in: Linear::new(&format!("{name}/pointwise_in"), d, 2 * d, true, rng),
            depthwise: Param::new(
                format!("{name}/depthwise/weight"),
                (0..d * kernel).map(|_| el(rng.uniform_range(-bound, bound))).collect(),
                &[d, kernel],
            ),
            depthwise_bias: Param::new(format!("{name}/depthwise/bias"), vec![T::zero(); d], &[d]),
            bn: BatchNorm::new(&format!("{name}/bn"), d, 1),
            pointwise_out: Linear::new(&format!("{name}/pointwise_out"), d, d, true, rng),
        }
    }

    fn forward(&self, x: &Tensor<T>, mask: Option<&Tensor<T>>, p: f64, ctx: &mut Ctx) -> Result<Tensor<T>> {
        let mut h = self.pointwise_in.forward(&self.norm.forward(x)?)?.glu(2)?;
        if let Some(m) = mask {
            h = h.mul(m)?;
        }
        let k = self.depthwise.shape()[1];
        let h = h
            .permute(&[0, 2, 1])?
            .depthwise_conv1d(&self.depthwise.get(), Some(&self.depthwise_bias.get()), k / 2)?;
        let h = self.bn.forward(&h, ctx)?.swish().permute(&[0, 2, 1])?;
        dropout(&self.pointwise_out.forward(&h)?, p, ctx)
    }
}

impl<T: Element> Module<T> for ConvModule<T> {
    fn collect(&self, out: &mut Vec<Param<T>>) {
        self.norm.collect(out);
        self.pointwise_in.collect(out);
        out.push(self.depthwise.clone());
        out.push(self.depthwise_bias.clone());
        self.bn.collect(out);
        self.pointwise_out.collect(out);
    }
}

/// Macaron block: half FFN, self-attention, convolution, half FFN, LayerNorm.
pub struct ConformerBlock<T: Element> {
    pub ffn1: FeedForward<T>,
    pub mhsa: SelfAttention<T>,
    pub conv: ConvModule<T>,
    pub ffn2: FeedForward<T>,
    pub final_norm: LayerNorm<T>,
    pub dropout: f64,
}

/// Padding masks shared by every block.
pub struct BlockMasks<T: Element> {
    pub frames: Tensor<T>,
    pub key_bias: Tensor<T>,
}

impl<T: Element> BlockMasks<T> {
    pub fn new(lengths: &[usize], frames: usize, heads: usize) -> Self {
        let bias = lengths
            .iter()
            .flat_map(|&l| {
                std::iter::repeat_n(l, heads)
                    .flat_map(move |l| (0..frames).map(move |t| if t < l { T::zero() } else { el(-1e9) }))
            })
            .collect();
        Self {
            frames: frame_mask(lengths, frames),
            key_bias: Tensor::from_vec(bias, &[lengths.len() * heads, 1, frames]).expect("bias shape"),
        }
    }
}

impl<T: Element> ConformerBlock<T> {
    pub fn new(name: &str, cfg: &ConformerConfig, rng: &mut Rng) -> Self {
        Self {
            ffn1: FeedForward::new(&format!("{name}/ffn1"), cfg.d_model, cfg.ffn_units, rng),
            mhsa: SelfAttention::new(&format!("{name}/mhsa"), cfg.d_model, cfg.heads, rng),
            conv: ConvModule::new(&format!("{name}/conv"), cfg.d_model, cfg.conv_kernel, rng),
            ffn2: FeedForward::new(&format!("{name}/ffn2"), cfg.d_model, cfg.ffn_units, rng),
            final_norm: LayerNorm::new(&format!("{name}/final_norm"), cfg.d_model),
            dropout: cfg.dropout,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, masks: Option<&BlockMasks<T>>, ctx: &mut Ctx) -> Result<Tensor<T>> {
        let p = self.dropout;
        let x1 = x.add(&self.ffn1.forward(x, p, ctx)?.mul_scalar(0.5))?;
        let x2 = x1.add(&self.mhsa.forward(&x1, masks.map(|m| &m.key_bias), p, ctx)?)?;
        let x3 = x2.add(&self.conv.forward(&x2, masks.map(|m| &m.frames), p, ctx)?)?;
        self.final_norm
            .forward(&x3.add(&self.ffn2.forward(&x3, p, ctx)?.mul_scalar(0.5))?)
    }
}

impl<T: Element> Module<T> for ConformerBlock<T> {
    fn collect(&self, out: &mut Vec<Param<T>>) {
        self.ffn1.collect(out);
        self.mhsa.collect(out);
        self.conv.collect(out);
        self.ffn2.collect(out);
        self.final_norm.collect(out);
    }
}

pub struct EncoderOutput<T: Element> {
    /// `(B, T', d_model)`.
    pub encoded: Tensor<T>,
    /// `(B, T', vocab_size + 1)`, blank at index 0.
    pub logits: Tensor<T>,
    pub lengths: Vec<usize>,
}

pub struct ConformerAsr<T: Element> {
    pub config: ConformerConfig,
    pub input_norm: Option<BatchNorm<T>>,
    pub subsample: Subsampling<T>,
    pub blocks: Vec<ConformerBlock<T>>,
    pub ctc_head: Linear<T>,
}

impl<T: Element> ConformerAsr<T> {
    pub fn new(config: ConformerConfig, rng: &mut Rng) -> std::result::Result<Self, ConformerConfigError> {
        config.validate()?;
        let input_norm = match config.input_norm {
            InputNorm::BatchNorm => Some(BatchNorm::new("asr/input_bn", config.n_bins, 2)),
            InputNorm::None => None,
        };
        let subsample = Subsampling::new(&config, rng);
        let blocks = (0..config.num_blocks)
            .map(|i| ConformerBlock::new(&format!("asr/block{i}"), &config, rng))
            .collect();
        let ctc_head = Linear::new("asr/ctc_head", config.d_model, config.vocab_size + 1, true, rng);
        Ok(Self {
            config,
            input_norm,
            subsample,
            blocks,
            ctc_head,
        })
    }

    /// Encodes `(B, T, Q)` features whose valid lengths are `lengths`.
    pub fn forward(&self, x: &Tensor<T>, lengths: &[usize], ctx: &mut Ctx) -> Result<EncoderOutput<T>> {
        if x.rank() != 3 || x.dim(2) != self.config.n_bins || lengths.len() != x.dim(0) {
            return Err(invalid(
                "conformer",
                format!(
                    "expected (batch, frames, {}) with {} lengths, got {:?}",
                    self.config.n_bins,
                    lengths.len(),
                    x.shape()
                ),
            ));
        }
        let x = match &self.input_norm {
            Some(bn) => bn.forward(x, ctx)?,
            None => x.clone(),
        };
        let h = self.subsample.forward(&x, self.config.dropout, ctx)?;
        let t2 = h.dim(1);
        let mut h = h.add(&sinusoidal_positions(t2, self.config.d_model))?;
        let out_lengths: Vec<usize> = lengths.iter().map(|&l| subsampled_len(l).min(t2)).collect();
        let masks = BlockMasks::new(&out_lengths, t2, self.config.heads);
        for block in &self.blocks {
            h = block.forward(&h, Some(&masks), ctx)?;
        }
        let logits = self.ctc_head.forward(&h)?;
        Ok(EncoderOutput {
            encoded: h,
            logits,
            lengths: out_lengths,
        })
    }
}

impl<T: Element> Module<T> for ConformerAsr<T> {
    fn collect(&self, out: &mut Vec<Param<T>>) {
        if let Some(bn) = &self.input_norm {
            bn.collect(out);
        }
        self.subsample.collect(out);
        self.blocks.iter().for_each(|b| b.collect(out));
        self.ctc_head.collect(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsampled_length_is_ceil_quarter() {
        assert_eq!(subsampled_len(100), 25);
        assert_eq!(subsampled_len(101), 26);
        assert_eq!(subsampled_len(8), 2);
    }

    #[test]
    fn config_validation() {
        let mut c = ConformerConfig::desk(5);
        c.validate().unwrap();
        c.heads = 3;
        assert!(matches!(c.validate(), Err(ConformerConfigError::Heads { .. })));
        c.heads = 4;
        c.conv_kernel = 14;
        assert_eq!(c.validate(), Err(ConformerConfigError::EvenKernel(14)));
    }

    #[test]
    fn too_few_frames_is_an_error() {
        let mut rng = Rng::seed_from_u64(0);
        let m = ConformerAsr::<f32>::new(ConformerConfig::desk(3), &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 7, 80]);
        let err = m.forward(&x, &[7], &mut Ctx::eval()).err().unwrap();
        assert!(err.to_string().contains("at least 8"), "{err}");
    }

    #[test]
    fn output_shapes() {
        let mut rng = Rng::seed_from_u64(1);
        let m = ConformerAsr::<f32>::new(ConformerConfig::desk(3), &mut rng).unwrap();
        let x = Tensor::from_vec((0..2 * 100 * 80).map(|_| rng.normal() as f32).collect(), &[2, 100, 80]).unwrap();
        let out = m.forward(&x, &[100, 60], &mut Ctx::train(&mut rng)).unwrap();
        assert_eq!(out.encoded.shape(), &[2, 25, 64]);
        assert_eq!(out.logits.shape(), &[2, 25, 4]);
        assert_eq!(out.lengths, vec![25, 15]);
        assert!(out.logits.data().iter().all(|v| v.is_finite()));
    }
}
