//! Clean-corpus statistics, confidence thresholds and binary gate labels.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::dsp::LogFbank;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("clip {index} has {got} bins, expected {expected}")]
    BinMismatch { index: usize, expected: usize, got: usize },
    #[error("epsilons must be non-empty and strictly ascending, got {0:?}")]
    BadEpsilons(Vec<f64>),
    #[error("stats file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LabelError>;

/// Per-bin mean and population standard deviation of per-clip time means.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub clips: usize,
}

impl CorpusStats {
    pub fn n_bins(&self) -> usize {
        self.mu.len()
    }
}

/// Collects per-clip time means so clips can be streamed from disk.
#[derive(Debug, Default, Clone)]
pub struct StatsAccumulator {
    clip_means: Vec<Vec<f64>>,
}

impl StatsAccumulator {
    pub fn push(&mut self, clip: &LogFbank) -> Result<()> {
        if let Some(first) = self.clip_means.first() {
            if first.len() != clip.n_bins {
                return Err(LabelError::BinMismatch {
                    index: self.clip_means.len(),
                    expected: first.len(),
                    got: clip.n_bins,
                });
            }
        }
        let mut mean = vec![0.0; clip.n_bins];
        for t in 0..clip.frames {
            for (m, &v) in mean.iter_mut().zip(clip.row(t)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= clip.frames as f64);
        self.clip_means.push(mean);
        Ok(())
    }

    pub fn finish(&self) -> Result<CorpusStats> {
        let d = self.clip_means.len();
        let q = self.clip_means.first().ok_or(LabelError::EmptyCorpus)?.len();
        let mut mu = vec![0.0; q];
        for m in &self.clip_means {
            mu.iter_mut().zip(m).for_each(|(a, b)| *a += b);
        }
        mu.iter_mut().for_each(|a| *a /= d as f64);
        let mut var = vec![0.0; q];
        for m in &self.clip_means {
            var.iter_mut().zip(m.iter().zip(&mu)).for_each(|(v, (x, u))| *v += (x - u).powi(2));
        }
        let sigma = var.into_iter().map(|v| (v / d as f64).sqrt()).collect();
        Ok(CorpusStats { mu, sigma, clips: d })
    }
}

pub fn corpus_stats(clean_set: &[LogFbank]) -> Result<CorpusStats> {
    let mut acc = StatsAccumulator::default();
    for clip in clean_set {
        acc.push(clip)?;
    }
    acc.finish()
}

/// `kappas[i][q] = mu[q] + epsilons[i] * sigma[q]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSet {
    pub epsilons: Vec<f64>,
    pub kappas: Vec<Vec<f64>>,
}

impl ThresholdSet {
    pub fn len(&self) -> usize {
        self.epsilons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epsilons.is_empty()
    }
}

pub fn validate_epsilons(epsilons: &[f64]) -> Result<()> {
    let ascending = epsilons.windows(2).all(|w| w[0] < w[1]);
    if epsilons.is_empty() || !ascending || epsilons.iter().any(|e| !e.is_finite()) {
        return Err(LabelError::BadEpsilons(epsilons.to_vec()));
    }
    Ok(())
}

pub fn make_thresholds(stats: &CorpusStats, epsilons: &[f64]) -> Result<ThresholdSet> {
    validate_epsilons(epsilons)?;
    let kappas = epsilons
        .iter()
        .map(|&e| stats.mu.iter().zip(&stats.sigma).map(|(m, s)| m + e * s).collect())
        .collect();
    Ok(ThresholdSet {
        epsilons: epsilons.to_vec(),
        kappas,
    })
}

/// Binary mask `(frames, n_bins)` for one offset.
#[derive(Debug, Clone, PartialEq)]
pub struct GateLabel {
    pub values: Vec<u8>,
    pub frames: usize,
    pub n_bins: usize,
    pub epsilon: f64,
}

impl GateLabel {
    pub fn positives(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }
}

/// One label per threshold row: 1 where the clean feature is at or above kappa.
pub fn make_gate_labels(x_clean: &LogFbank, thresholds: &ThresholdSet) -> Result<Vec<GateLabel>> {
    thresholds
        .kappas
        .iter()
        .zip(&thresholds.epsilons)
        .map(|(kappa, &epsilon)| {
            if kappa.len() != x_clean.n_bins {
                return Err(LabelError::BinMismatch {
                    index: 0,
                    expected: kappa.len(),
                    got: x_clean.n_bins,
                });
            }
            let values = x_clean
                .values
                .chunks(x_clean.n_bins)
                .flat_map(|row| row.iter().zip(kappa).map(|(&x, &k)| u8::from(x as f64 >= k)))
                .collect();
            Ok(GateLabel {
                values,
                frames: x_clean.frames,
                n_bins: x_clean.n_bins,
                epsilon,
            })
        })
        .collect()
}

const STATS_MAGIC: &[u8; 8] = b"MCGSTATS";
const STATS_VERSION: u32 = 1;

/// Frozen statistics together with the offsets used to derive labels.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsFile {
    pub stats: CorpusStats,
    pub epsilons: Vec<f64>,
}

impl StatsFile {
    pub fn thresholds(&self) -> Result<ThresholdSet> {
        make_thresholds(&self.stats, &self.epsilons)
    }

    pub fn write(&self, mut out: impl Write) -> Result<()> {
        out.write_all(STATS_MAGIC)?;
        out.write_all(&STATS_VERSION.to_le_bytes())?;
        for v in [self.stats.n_bins(), self.stats.clips, self.epsilons.len()] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        for v in self.epsilons.iter().chain(&self.stats.mu).chain(&self.stats.sigma) {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != STATS_MAGIC {
            return Err(LabelError::Format("bad magic".into()));
        }
        let mut v = [0u8; 4];
        input.read_exact(&mut v)?;
        if u32::from_le_bytes(v) != STATS_VERSION {
            return Err(LabelError::Format(format!("unsupported version {}", u32::from_le_bytes(v))));
        }
        let mut header = [0u8; 24];
        input.read_exact(&mut header)?;
        let h: Vec<usize> = header
            .chunks(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let (q, d, n) = (h[0], h[1], h[2]);
        let mut f64s = |count: usize| -> Result<Vec<f64>> {
            let mut b = vec![0u8; 8 * count];
            input.read_exact(&mut b)?;
            Ok(b.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let epsilons = f64s(n)?;
        let mu = f64s(q)?;
        let sigma = f64s(q)?;
        Ok(Self {
            stats: CorpusStats { mu, sigma, clips: d },
            epsilons,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::fs::read(path)?.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::FrameParams;

    fn clip(values: Vec<f32>, n_bins: usize) -> LogFbank {
        LogFbank {
            frames: values.len() / n_bins,
            values,
            n_bins,
            params: FrameParams::default(),
            sample_rate: 16000,
        }
    }

    #[test]
    fn single_clip_has_zero_sigma() {
        let s = corpus_stats(&[clip(vec![1.0, 2.0, 3.0, 6.0], 2)]).unwrap();
        assert_eq!(s.mu, vec![2.0, 4.0]);
        assert_eq!(s.sigma, vec![0.0, 0.0]);
    }

    #[test]
    fn two_constant_clips_give_unit_sigma() {
        let s = corpus_stats(&[clip(vec![1.0; 6], 2), clip(vec![3.0; 10], 2)]).unwrap();
        assert_eq!(s.mu, vec![2.0, 2.0]);
        assert_eq!(s.sigma, vec![1.0, 1.0]);
    }

    #[test]
    fn empty_and_mismatched_corpora_are_errors() {
        assert!(matches!(corpus_stats(&[]), Err(LabelError::EmptyCorpus)));
        assert!(matches!(
            corpus_stats(&[clip(vec![0.0; 4], 2), clip(vec![0.0; 3], 3)]),
            Err(LabelError::BinMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn thresholds_substitute_directly() {
        let stats = CorpusStats {
            mu: vec![2.0],
            sigma: vec![1.0],
            clips: 2,
        };
        let th = make_thresholds(&stats, &[-1.0, 1.0, 2.0]).unwrap();
        assert_eq!(th.kappas, vec![vec![1.0], vec![3.0], vec![4.0]]);
        assert_eq!(make_thresholds(&stats, &[0.0]).unwrap().kappas, vec![vec![2.0]]);
        let flat = CorpusStats {
            mu: vec![5.0],
            sigma: vec![0.0],
            clips: 1,
        };
        assert!(make_thresholds(&flat, &[-3.0, 7.0]).unwrap().kappas.iter().all(|k| k == &vec![5.0]));
    }

    #[test]
    fn unsorted_epsilons_are_rejected() {
        let stats = CorpusStats {
            mu: vec![0.0],
            sigma: vec![1.0],
            clips: 1,
        };
        assert!(make_thresholds(&stats, &[1.0, -1.0]).is_err());
        assert!(make_thresholds(&stats, &[]).is_err());
    }

    #[test]
    fn value_equal_to_kappa_is_labelled_speech() {
        let th = ThresholdSet {
            epsilons: vec![0.0],
            kappas: vec![vec![0.5, 0.5]],
        };
        let labels = make_gate_labels(&clip(vec![0.5, 0.25], 2), &th).unwrap();
        assert_eq!(labels[0].values, vec![1, 0]);
    }

    #[test]
    fn silence_far_below_threshold_is_all_zero() {
        let stats = CorpusStats {
            mu: vec![0.0; 3],
            sigma: vec![1.0; 3],
            clips: 4,
        };
        let th = make_thresholds(&stats, &[-1.0, 1.0, 2.0]).unwrap();
        let labels = make_gate_labels(&clip(vec![-23.0; 12], 3), &th).unwrap();
        assert!(labels.iter().all(|l| l.positives() == 0));
    }

    #[test]
    fn stats_file_round_trip() {
        let f = StatsFile {
            stats: CorpusStats {
                mu: vec![1.5, -2.0],
                sigma: vec![0.25, 3.0],
                clips: 7,
            },
            epsilons: vec![-1.0, 1.0, 2.0],
        };
        let mut buf = Vec::new();
        f.write(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 24 + 8 * (3 + 4));
        assert_eq!(StatsFile::read(buf.as_slice()).unwrap(), f);
    }
}
