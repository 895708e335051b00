//! Deterministic inputs shared by the benchmarks.

use mcgate_core::data::{synth_utterance, Jitter};
use mcgate_core::dsp::Waveform;
use mcgate_core::numerics::rng::Rng;
use mcgate_core::{Element, Tensor};

/// Standard-normal tensor from a fixed seed.
pub fn normal_tensor<T: Element>(seed: u64, shape: &[usize]) -> Tensor<T> {
    let mut rng = Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let values = (0..n).map(|_| T::from_f64(rng.normal())).collect();
    Tensor::from_vec(values, shape).expect("shape matches")
}

/// A toy utterance of `tokens` tokens at 16 kHz.
pub fn utterance(tokens: usize) -> Waveform {
    let ids: Vec<usize> = (0..tokens).map(|i| 1 + i % 6).collect();
    synth_utterance(&ids, 16000, Jitter::default()).0
}

/// Random token sequences over `vocab` symbols.
pub fn token_pairs(seed: u64, count: usize, len: usize, vocab: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut rng = Rng::seed_from_u64(seed);
    let seq = |rng: &mut Rng| (0..len).map(|_| rng.below(vocab)).collect::<Vec<_>>();
    (0..count).map(|_| (seq(&mut rng), seq(&mut rng))).collect()
}
