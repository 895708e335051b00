//! Multiple-confidence-gate (MCG) speech front-end jointly trained with a
//! Conformer-CTC recognizer, built on a small self-contained autodiff stack.
//!
//! Module map:
//! - [`numerics`]: tensors, reverse-mode autodiff, Adam, plateau schedule,
//!   checkpoint container.
//! - [`dsp`] and [`wav`]: waveform IO and log filterbank features.
//! - [`labels`]: clean-corpus statistics, thresholds and binary gate labels.
//! - [`nn`], [`mcg`], [`conformer`]: layers and the two networks.
//! - [`loss`]: gate, filtered-consistency, encoder-consistency and CTC losses.
//! - [`data`]: toy corpus synthesis, SNR mixing, manifests and batching.
//! - [`metrics`]: greedy CTC decoding, WER alignment, SI-SDR.
//! - [`config`] and [`train`]: run configuration, training, evaluation, sweeps.

pub mod config;
pub mod conformer;
pub mod data;
pub mod dsp;
pub mod labels;
pub mod loss;
pub mod mcg;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod train;
pub mod wav;

pub use numerics::{no_grad, Element, Param, Tensor, TensorError};
pub use config::{ConfigError, RunConfig};
pub use data::{Dataset, NoiseCondition, SynthConfig};
pub use dsp::{FbankExtractor, LogFbank};
pub use labels::{CorpusStats, StatsFile, ThresholdSet};
pub use loss::{JointLossBreakdown, LossWeights};
pub use train::{JointModel, TrainError, Trainer};
