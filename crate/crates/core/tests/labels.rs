use mcgate_core::dsp::{FrameParams, LogFbank};
use mcgate_core::labels::{corpus_stats, make_gate_labels, make_thresholds, CorpusStats, ThresholdSet};
use mcgate_core::numerics::rng::Rng;
use proptest::prelude::*;

fn clip(values: Vec<f32>, n_bins: usize) -> LogFbank {
    LogFbank {
        frames: values.len() / n_bins,
        values,
        n_bins,
        params: FrameParams::default(),
        sample_rate: 16000,
    }
}

fn random_corpus(rng: &mut Rng, d: usize, q: usize) -> Vec<LogFbank> {
    (0..d)
        .map(|_| {
            let t = 1 + rng.below(12);
            clip((0..t * q).map(|_| (rng.normal() * 3.0 - 5.0) as f32).collect(), q)
        })
        .collect()
}

/// Per-clip means by explicit double loop, then mean and population std.
fn two_pass_oracle(corpus: &[LogFbank]) -> (Vec<f64>, Vec<f64>) {
    let q = corpus[0].n_bins;
    let mut means = vec![vec![0.0f64; q]; corpus.len()];
    for (c, m) in corpus.iter().zip(means.iter_mut()) {
        for b in 0..q {
            let mut s = 0.0;
            for t in 0..c.frames {
                s += c.values[t * q + b] as f64;
            }
            m[b] = s / c.frames as f64;
        }
    }
    let d = corpus.len() as f64;
    let mu: Vec<f64> = (0..q).map(|b| means.iter().map(|m| m[b]).sum::<f64>() / d).collect();
    let sigma = (0..q)
        .map(|b| (means.iter().map(|m| (m[b] - mu[b]) * (m[b] - mu[b])).sum::<f64>() / d).sqrt())
        .collect();
    (mu, sigma)
}

#[test]
fn five_clip_corpus_matches_two_pass_oracle() {
    let mut rng = Rng::seed_from_u64(5);
    let corpus = random_corpus(&mut rng, 5, 6);
    let stats = corpus_stats(&corpus).unwrap();
    let (mu, sigma) = two_pass_oracle(&corpus);
    for b in 0..6 {
        assert!((stats.mu[b] - mu[b]).abs() < 1e-6);
        assert!((stats.sigma[b] - sigma[b]).abs() < 1e-6);
    }
}

#[test]
fn random_matrix_matches_double_loop_thresholding() {
    let mut rng = Rng::seed_from_u64(9);
    let x = clip((0..24).map(|_| rng.normal() as f32).collect(), 4);
    let stats = CorpusStats {
        mu: (0..4).map(|_| rng.normal() * 0.5).collect(),
        sigma: (0..4).map(|_| rng.uniform()).collect(),
        clips: 3,
    };
    let th = make_thresholds(&stats, &[-1.0, 1.0, 2.0]).unwrap();
    let labels = make_gate_labels(&x, &th).unwrap();
    for (i, label) in labels.iter().enumerate() {
        for t in 0..6 {
            for q in 0..4 {
                let expected = if x.values[t * 4 + q] as f64 >= th.kappas[i][q] { 1 } else { 0 };
                assert_eq!(label.values[t * 4 + q], expected);
            }
        }
    }
}

#[test]
fn mismatched_bins_are_rejected() {
    let th = ThresholdSet {
        epsilons: vec![0.0],
        kappas: vec![vec![0.0; 3]],
    };
    assert!(make_gate_labels(&clip(vec![0.0; 4], 2), &th).is_err());
}

proptest! {
    #[test]
    fn labels_shrink_as_epsilon_grows(seed in any::<u64>(), e1 in -3.0f64..3.0, gap in 0.01f64..3.0) {
        let mut rng = Rng::seed_from_u64(seed);
        let corpus = random_corpus(&mut rng, 4, 5);
        let stats = corpus_stats(&corpus).unwrap();
        let th = make_thresholds(&stats, &[e1, e1 + gap]).unwrap();
        for c in &corpus {
            let l = make_gate_labels(c, &th).unwrap();
            prop_assert!(l[0].positives() >= l[1].positives());
            for (a, b) in l[0].values.iter().zip(&l[1].values) {
                prop_assert!(*b == 0 || *a == 1);
            }
        }
    }

    #[test]
    fn stats_ignore_clip_order(seed in any::<u64>()) {
        let mut rng = Rng::seed_from_u64(seed);
        let mut corpus = random_corpus(&mut rng, 6, 3);
        let a = corpus_stats(&corpus).unwrap();
        corpus.reverse();
        let b = corpus_stats(&corpus).unwrap();
        for q in 0..3 {
            prop_assert!((a.mu[q] - b.mu[q]).abs() < 1e-6);
            prop_assert!((a.sigma[q] - b.sigma[q]).abs() < 1e-6);
        }
    }
}
