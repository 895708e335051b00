//! Multiple-confidence-gate front-end: a CRN encoder/decoder with an LSTM
//! bottleneck, one sigmoid gate head per confidence offset, and a fusion
//! block that merges the gated spectra.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{BatchNorm, Conv2d, ConvTranspose2d, Ctx, Linear, Lstm, Module, Prelu};
use crate::numerics::element::{el, Element};
use crate::numerics::ops::Conv2dGeometry;
use crate::numerics::rng::Rng;
use crate::numerics::tensor::{invalid, Result};
use crate::numerics::{Param, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum McgConfigError {
    #[error("{0} encoder channels but {1} frequency strides")]
    LengthMismatch(usize, usize),
    #[error("{n_bins} bins not divisible by total frequency stride {stride}")]
    Indivisible { n_bins: usize, stride: usize },
    #[error("at least one encoder layer and one gate are required")]
    Empty,
    #[error("zero-sized dimension in configuration")]
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McgConfig {
    pub n_bins: usize,
    pub channels: Vec<usize>,
    /// Frequency stride of each encoder block; time is never strided.
    pub freq_strides: Vec<usize>,
    pub lstm_units: usize,
    /// Decoder channels per gate head.
    pub head_channels: usize,
    pub epsilons: Vec<f64>,
}

impl McgConfig {
    pub fn paper() -> Self {
        Self {
            n_bins: 80,
            channels: vec![32, 48, 64, 80, 96],
            freq_strides: vec![1, 1, 2, 2, 1],
            lstm_units: 128,
            head_channels: 10,
            epsilons: vec![-1.0, 1.0, 2.0],
        }
    }

    /// Same topology with narrow channels for single-core training.
    pub fn desk() -> Self {
        Self {
            channels: vec![8, 8, 12, 12, 16],
            lstm_units: 32,
            ..Self::paper()
        }
    }

    pub fn n_gates(&self) -> usize {
        self.epsilons.len()
    }

    pub fn total_freq_stride(&self) -> usize {
        self.freq_strides.iter().product()
    }

    pub fn bottleneck_bins(&self) -> usize {
        self.n_bins / self.total_freq_stride()
    }

    /// Width of the flattened bottleneck, restored by the post-LSTM FC.
    pub fn fc_units(&self) -> usize {
        self.channels.last().copied().unwrap_or(0) * self.bottleneck_bins()
    }

    pub fn last_decoder_channels(&self) -> usize {
        self.head_channels * self.n_gates()
    }

    pub fn validate(&self) -> std::result::Result<(), McgConfigError> {
        if self.channels.is_empty() || self.epsilons.is_empty() {
            return Err(McgConfigError::Empty);
        }
        if self.channels.len() != self.freq_strides.len() {
            return Err(McgConfigError::LengthMismatch(self.channels.len(), self.freq_strides.len()));
        }
        let dims = [self.n_bins, self.lstm_units, self.head_channels];
        if dims.iter().chain(&self.channels).chain(&self.freq_strides).any(|&d| d == 0) {
            return Err(McgConfigError::Zero);
        }
        let stride = self.total_freq_stride();
        if self.n_bins % stride != 0 {
            return Err(McgConfigError::Indivisible {
                n_bins: self.n_bins,
                stride,
            });
        }
        Ok(())
    }
}

/// Conv (or transposed conv) followed by batch norm and PReLU.
pub struct ConvBlock<T: Element> {
    conv: ConvKind<T>,
    pub bn: BatchNorm<T>,
    pub act: Prelu<T>,
    pub in_channels: usize,
    pub out_channels: usize,
}

enum ConvKind<T: Element> {
    Forward(Conv2d<T>),
    Transposed(ConvTranspose2d<T>),
}

impl<T: Element> ConvBlock<T> {
    fn geometry(freq_stride: usize) -> Conv2dGeometry {
        Conv2dGeometry::new((3, 3), (1, freq_stride), (1, 1))
    }

    pub fn new(name: &str, cin: usize, cout: usize, freq_stride: usize, rng: &mut Rng) -> Self {
        Self {
            conv: ConvKind::Forward(Conv2d::new(&format!("{name}/conv"), cin, cout, Self::geometry(freq_stride), rng)),
            bn: BatchNorm::new(&format!("{name}/bn"), cout, 1),
            act: Prelu::new(&format!("{name}/prelu"), cout, 1),
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn transposed(name: &str, cin: usize, cout: usize, freq_stride: usize, rng: &mut Rng) -> Self {
        let conv = ConvTranspose2d::new(
            &format!("{name}/deconv"),
            cin,
            cout,
            Self::geometry(freq_stride),
            (0, freq_stride - 1),
            rng,
        );
        Self {
            conv: ConvKind::Transposed(conv),
            bn: BatchNorm::new(&format!("{name}/bn"), cout, 1),
            act: Prelu::new(&format!("{name}/prelu"), cout, 1),
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx) -> Result<Tensor<T>> {
        let y = match &self.conv {
            ConvKind::Forward(c) => c.forward(x)?,
            ConvKind::Transposed(c) => c.forward(x)?,
        };
        self.act.forward(&self.bn.forward(&y, ctx)?)
    }
}

impl<T: Element> Module<T> for ConvBlock<T> {
    fn collect(&self, out: &mut Vec<Param<T>>) {
        match &self.conv {
            ConvKind::Forward(c) => c.collect(out),
            ConvKind::Transposed(c) => c.collect(out),
        }
        self.bn.collect(out);
        self.act.collect(out);
    }
}

/// One confidence head: a `head_channels -> 1` FC applied at every (t, q).
pub struct GateHead<T: Element> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Element> GateHead<T> {
    fn new(name: &str, channels: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        Self {
            weight: Param::new(
                format!("{name}/weight"),
                (0..channels).map(|_| el(rng.uniform_range(-bound, bound))).collect(),
                &[channels, 1],
            ),
            bias: Param::new(format!("{name}/bias"), vec![T::zero()], &[1]),
        }
    }

    /// `features` is `(B, C, T, Q)`; returns gates `(B, T, Q)`.
    fn forward(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, t, q) = (features.dim(0), features.dim(2), features.dim(3));
        features
            .permute(&[0, 2, 3, 1])?
            .matmul(&self.weight.get())?
            .add(&self.bias.get())?
            .reshape(&[b, t, q])
            .map(|z| z.sigmoid())
    }
}

pub struct McgOutput<T: Element> {
    /// One `(B, T, Q)` gate per offset, values in (0, 1).
    pub gates: Vec<Tensor<T>>,
    /// Gated spectra `G_i * X`.
    pub filtered: Vec<Tensor<T>>,
    /// Fused recognizer input `(B, T, Q)`.
    pub x_in: Tensor<T>,
}

pub struct McgModel<T: Element> {
    pub config: McgConfig,
    pub encoder: Vec<ConvBlock<T>>,
    pub lstm: Lstm<T>,
    pub fc: Linear<T>,
    pub decoder: Vec<ConvBlock<T>>,
    pub heads: Vec<GateHead<T>>,
    pub fusion: ConvBlock<T>,
}

/// `R_i = G_i * X` for every gate.
pub fn apply_gates<T: Element>(gates: &[Tensor<T>], x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    gates
        .iter()
        .map(|g| {
            if g.shape() != x.shape() {
                return Err(invalid(
                    "apply_gates",
                    format!("gate {:?} vs spectrum {:?}", g.shape(), x.shape()),
                ));
            }
            g.mul(x)
        })
        .collect()
}

impl<T: Element> McgModel<T> {
    pub fn new(config: McgConfig, rng: &mut Rng) -> std::result::Result<Self, McgConfigError> {
        config.validate()?;
        let l = config.channels.len();
        let mut encoder = Vec::with_capacity(l);
        let mut cin = 1;
        for (i, (&c, &s)) in config.channels.iter().zip(&config.freq_strides).enumerate() {
            encoder.push(ConvBlock::new(&format!("mcg/enc{i}"), cin, c, s, rng));
            cin = c;
        }
        let flat = config.fc_units();
        let lstm = Lstm::new("mcg/lstm", flat, config.lstm_units, rng);
        let fc = Linear::new("mcg/fc", config.lstm_units, flat, true, rng);
        let mut decoder = Vec::with_capacity(l);
        let mut prev = *config.channels.last().unwrap();
        for i in 0..l {
            let skip = encoder[l - 1 - i].out_channels;
            let out = if i + 1 == l {
                config.last_decoder_channels()
            } else {
                config.channels[l - 2 - i]
            };
            let block = ConvBlock::transposed(&format!("mcg/dec{i}"), prev + skip, out, config.freq_strides[l - 1 - i], rng);
            assert_eq!(block.in_channels, prev + skip, "decoder {i} input must be previous output plus skip");
            decoder.push(block);
            prev = out;
        }
        let heads = (0..config.n_gates())
            .map(|i| GateHead::new(&format!("mcg/head{i}"), config.head_channels, rng))
            .collect();
        let fusion = ConvBlock::new("mcg/fusion", config.n_gates(), 1, 1, rng);
        Ok(Self {
            config,
            encoder,
            lstm,
            fc,
            decoder,
            heads,
            fusion,
        })
    }

    /// Decoder feature map `(B, head_channels * n, T, Q)` for input `(B, T, Q)`.
    pub fn trunk(&self, x: &Tensor<T>, ctx: &Ctx) -> Result<Tensor<T>> {
        if x.rank() != 3 || x.dim(2) != self.config.n_bins {
            return Err(invalid(
                "mcg",
                format!("expected (batch, frames, {}), got {:?}", self.config.n_bins, x.shape()),
            ));
        }
        let (b, t) = (x.dim(0), x.dim(1));
        let mut h = x.reshape(&[b, 1, t, self.config.n_bins])?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            h = block.forward(&h, ctx)?;
            skips.push(h.clone());
        }
        let (c, f) = (h.dim(1), h.dim(3));
        let seq = h.permute(&[0, 2, 1, 3])?.reshape(&[b, t, c * f])?;
        let z = self.fc.forward(&self.lstm.forward(&seq)?)?;
        h = z.reshape(&[b, t, c, f])?.permute(&[0, 2, 1, 3])?;
        for (block, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            h = block.forward(&Tensor::concat(&[h, skip.clone()], 1)?, ctx)?;
        }
        Ok(h)
    }

    pub fn gates(&self, x: &Tensor<T>, ctx: &Ctx) -> Result<Vec<Tensor<T>>> {
        let h = self.trunk(x, ctx)?;
        let k = self.config.head_channels;
        self.heads
            .iter()
            .enumerate()
            .map(|(i, head)| head.forward(&h.narrow(1, i * k, k)?))
            .collect()
    }

    /// Fusion block over the channel-stacked gated spectra.
    pub fn fuse(&self, filtered: &[Tensor<T>], ctx: &Ctx) -> Result<Tensor<T>> {
        let stacked = Tensor::stack(filtered, 1)?;
        let (b, t, q) = (stacked.dim(0), stacked.dim(2), stacked.dim(3));
        self.fusion.forward(&stacked, ctx)?.reshape(&[b, t, q])
    }

    /// Gating and fusion for externally supplied gates.
    pub fn forward_from_gates(&self, gates: Vec<Tensor<T>>, x: &Tensor<T>, ctx: &Ctx) -> Result<McgOutput<T>> {
        let filtered = apply_gates(&gates, x)?;
        let x_in = self.fuse(&filtered, ctx)?;
        Ok(McgOutput { gates, filtered, x_in })
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &Ctx) -> Result<McgOutput<T>> {
        let gates = self.gates(x, ctx)?;
        self.forward_from_gates(gates, x, ctx)
    }
}

impl<T: Element> Module<T> for McgModel<T> {
    fn collect(&self, out: &mut Vec<Param<T>>) {
        self.encoder.iter().for_each(|b| b.collect(out));
        self.lstm.collect(out);
        self.fc.collect(out);
        self.decoder.iter().for_each(|b| b.collect(out));
        for h in &self.heads {
            out.push(h.weight.clone());
            out.push(h.bias.clone());
        }
        self.fusion.collect(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> McgConfig {
        McgConfig {
            n_bins: 8,
            channels: vec![2, 3],
            freq_strides: vec![1, 2],
            lstm_units: 4,
            head_channels: 2,
            epsilons: vec![-1.0, 1.0],
        }
    }

    #[test]
    fn paper_config_reconciles_fc_width() {
        let c = McgConfig::paper();
        c.validate().unwrap();
        assert_eq!(c.bottleneck_bins(), 20);
        assert_eq!(c.fc_units(), 1920);
        assert_eq!(c.last_decoder_channels(), 30);
    }

    #[test]
    fn indivisible_bins_fail_at_build_time() {
        let c = McgConfig {
            n_bins: 78,
            ..McgConfig::paper()
        };
        assert_eq!(c.validate(), Err(McgConfigError::Indivisible { n_bins: 78, stride: 4 }));
        assert!(McgModel::<f32>::new(c, &mut Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn shapes_and_gate_range() {
        let m = McgModel::<f64>::new(tiny(), &mut Rng::seed_from_u64(1)).unwrap();
        let mut rng = Rng::seed_from_u64(2);
        let x = Tensor::from_vec((0..2 * 5 * 8).map(|_| rng.normal()).collect(), &[2, 5, 8]).unwrap();
        let out = m.forward(&x, &Ctx::train(&mut rng)).unwrap();
        assert_eq!(out.gates.len(), 2);
        for g in &out.gates {
            assert_eq!(g.shape(), &[2, 5, 8]);
            assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert_eq!(out.x_in.shape(), &[2, 5, 8]);
    }

    #[test]
    fn apply_gates_rejects_mismatch() {
        let g = Tensor::<f32>::zeros(&[1, 2, 3]);
        let x = Tensor::<f32>::zeros(&[1, 3, 2]);
        assert!(apply_gates(&[g], &x).is_err());
    }
}
