//! Independent reference implementations used by several test targets.
#![allow(dead_code)]

use std::path::Path;

use mcgate_core::config::RunConfig;
use mcgate_core::conformer::{ConformerConfig, InputNorm};
use mcgate_core::data::{synth_toy_corpus, Dataset, SynthConfig};
use mcgate_core::dsp::{FrameParams, LogFbank};
use mcgate_core::mcg::McgConfig;

pub fn clip(values: Vec<f32>, n_bins: usize) -> LogFbank {
    LogFbank {
        frames: values.len() / n_bins,
        values,
        n_bins,
        params: FrameParams::default(),
        sample_rate: 16000,
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Enumerates every frame-level path, collapses it and sums the
/// probabilities of those that spell `target`. Returns the negative log
/// likelihood and its gradient with respect to the logits.
pub fn ctc_brute_force(logits: &[f64], classes: usize, target: &[usize]) -> (f64, Vec<f64>) {
    let t = logits.len() / classes;
    let logp: Vec<Vec<f64>> = logits.chunks(classes).map(log_softmax).collect();
    let mut total = 0.0;
    let mut occupancy = vec![0.0; t * classes];
    let mut path = vec![0usize; t];
    for code in 0..classes.pow(t as u32) {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % classes;
            c /= classes;
        }
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &k in &path {
            if k != 0 && prev != Some(k) {
                collapsed.push(k);
            }
            prev = Some(k);
        }
        if collapsed != target {
            continue;
        }
        let p: f64 = path.iter().enumerate().map(|(f, &k)| logp[f][k]).sum::<f64>().exp();
        total += p;
        for (f, &k) in path.iter().enumerate() {
            occupancy[f * classes + k] += p;
        }
    }
    let grad = (0..t * classes)
        .map(|i| logp[i / classes][i % classes].exp() - occupancy[i] / total)
        .collect();
    (-total.ln(), grad)
}

/// Minimal unit-cost edit distance by plain recursion over the three
/// operations, without a table.
pub fn edit_distance_brute(a: &[usize], b: &[usize]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = edit_distance_brute(ra, rb) + usize::from(x != y);
            let del = edit_distance_brute(ra, b) + 1;
            let ins = edit_distance_brute(a, rb) + 1;
            sub.min(del).min(ins)
        }
    }
}

/// Per-clip time means, then the mean and population deviation of those
/// means, computed with explicit loops.
pub fn corpus_stats_oracle(corpus: &[LogFbank]) -> (Vec<f64>, Vec<f64>) {
    let q = corpus[0].n_bins;
    let mut means = vec![vec![0.0f64; q]; corpus.len()];
    for (c, m) in corpus.iter().zip(means.iter_mut()) {
        for (b, mb) in m.iter_mut().enumerate() {
            let mut s = 0.0;
            for t in 0..c.frames {
                s += c.values[t * q + b] as f64;
            }
            *mb = s / c.frames as f64;
        }
    }
    let d = corpus.len() as f64;
    let mu: Vec<f64> = (0..q).map(|b| means.iter().map(|m| m[b]).sum::<f64>() / d).collect();
    let sigma = (0..q)
        .map(|b| (means.iter().map(|m| (m[b] - mu[b]).powi(2)).sum::<f64>() / d).sqrt())
        .collect();
    (mu, sigma)
}

/// Binary labels for one clip and one offset.
pub fn labels_oracle(clip: &LogFbank, mu: &[f64], sigma: &[f64], epsilon: f64) -> Vec<u8> {
    let q = clip.n_bins;
    let mut out = vec![0u8; clip.values.len()];
    for t in 0..clip.frames {
        for b in 0..q {
            let kappa = mu[b] + epsilon * sigma[b];
            out[t * q + b] = u8::from(clip.values[t * q + b] as f64 >= kappa);
        }
    }
    out
}

/// Desk configuration shrunk to a few thousand parameters over 16 bins.
pub fn tiny_run_config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.mcg = McgConfig {
        n_bins: 16,
        channels: vec![2, 3, 2, 3, 2],
        freq_strides: vec![1, 1, 2, 2, 1],
        lstm_units: 3,
        head_channels: 2,
        epsilons: vec![-1.0, 1.0, 2.0],
    };
    cfg.asr = ConformerConfig {
        n_bins: 16,
        num_blocks: 1,
        d_model: 8,
        ffn_units: 12,
        heads: 2,
        conv_kernel: 3,
        subsample_channels: 2,
        vocab_size: 6,
        dropout: 0.1,
        input_norm: InputNorm::BatchNorm,
    };
    cfg
}

/// Synthesizes a corpus and loads its train, dev and test splits.
pub fn synth_splits(dir: &Path, cfg: &SynthConfig) -> (Dataset, Dataset, Dataset) {
    let paths = synth_toy_corpus(cfg, dir).unwrap();
    let load = |split: &str| Dataset::load(&paths.manifest(split), Some(&paths.noise_manifest(split))).unwrap();
    (load("train"), load("dev"), load("test"))
}
