use mcgate_core::dsp::{stft, FbankExtractor, Filterbank, FilterbankConfig, FrameParams, Waveform};
use mcgate_core::numerics::rng::Rng;

fn oracle_table() -> Vec<(f64, f64)> {
    include_str!("data/mel_16k_512_80.txt")
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| {
            let f: Vec<f64> = l.split_whitespace().map(|x| x.parse().unwrap()).collect();
            (f[1], f[2])
        })
        .collect()
}

#[test]
fn mel_filterbank_matches_standalone_table() {
    let fb = Filterbank::new(16000, 512, &FilterbankConfig::default()).unwrap();
    let table = oracle_table();
    assert_eq!(table.len(), 80);
    for (i, ((center, sum), (c, s))) in table.iter().zip(fb.centers_hz.iter().zip(fb.row_sums())).enumerate() {
        assert!((center - c).abs() < 1e-6, "filter {i}: center {c} vs {center}");
        assert!((sum - s).abs() < 1e-9, "filter {i}: row sum {s} vs {sum}");
    }
}

#[test]
fn white_noise_features_are_finite_and_bounded_by_frame_energy() {
    let mut rng = Rng::seed_from_u64(7);
    let w = Waveform::new((0..8000).map(|_| rng.normal() as f32 * 0.1).collect(), 16000);
    let ex = FbankExtractor::new(16000, FrameParams::default(), &FilterbankConfig::default()).unwrap();
    let feats = ex.extract(&w).unwrap();
    let spec = stft(&w, FrameParams::default()).unwrap();
    let max_weight = ex.filterbank.weights.iter().cloned().fold(0.0, f64::max);
    for t in 0..feats.frames {
        let energy: f64 = spec.frame(t).iter().map(|c| c.norm_sqr()).sum();
        let bound = (energy * max_weight).ln() as f32 + 1e-4;
        for &v in feats.row(t) {
            assert!(v.is_finite());
            assert!(v <= bound, "frame {t}: {v} > {bound}");
        }
    }
}

#[test]
fn one_hop_shift_moves_frames_by_one() {
    let mut rng = Rng::seed_from_u64(3);
    let base: Vec<f32> = (0..6000).map(|_| rng.normal() as f32).collect();
    let ex = FbankExtractor::new(16000, FrameParams::default(), &FilterbankConfig::default()).unwrap();
    let a = ex.extract(&Waveform::new(base.clone(), 16000)).unwrap();
    let b = ex.extract(&Waveform::new(base[128..].to_vec(), 16000)).unwrap();
    assert_eq!(b.frames + 1, a.frames);
    for t in 0..b.frames {
        for (x, y) in a.row(t + 1).iter().zip(b.row(t)) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn identical_input_gives_identical_bytes() {
    let mut rng = Rng::seed_from_u64(11);
    let w = Waveform::new((0..4000).map(|_| rng.normal() as f32).collect(), 16000);
    let ex = FbankExtractor::new(16000, FrameParams::default(), &FilterbankConfig::default()).unwrap();
    let a: Vec<u32> = ex.extract(&w).unwrap().values.iter().map(|v| v.to_bits()).collect();
    let b: Vec<u32> = ex.extract(&w.clone()).unwrap().values.iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);
}
