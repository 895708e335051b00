//! Greedy CTC decoding, edit-distance WER and SI-SDR.

use std::fmt;

use thiserror::Error;

use crate::loss::BLANK;
use crate::numerics::element::Element;
use crate::numerics::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("reference and estimate lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("reference signal has zero energy")]
    ZeroReference,
}

/// Argmax per frame, collapse repeats, drop blanks.
pub fn greedy_ctc_decode<T: Element>(logits: &[T], classes: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for row in logits.chunks(classes) {
        let best = row
            .iter()
            .enumerate()
            .fold((0, row[0]), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        if best != BLANK && prev != Some(best) {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// Decodes each item of `(B, T', C)` logits up to its valid length.
pub fn decode_batch<T: Element>(logits: &Tensor<T>, lengths: &[usize]) -> Vec<Vec<usize>> {
    let (t, c) = (logits.dim(1), logits.dim(2));
    logits
        .data()
        .chunks(t * c)
        .zip(lengths)
        .map(|(item, &l)| greedy_ctc_decode(&item[..l.min(t) * c], c))
        .collect()
}

/// Edit operations from one minimal alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AlignmentCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
}

impl AlignmentCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `None` for an empty reference.
    pub fn wer(&self) -> Option<f64> {
        (self.ref_len > 0).then(|| self.errors() as f64 / self.ref_len as f64)
    }
}

impl std::ops::AddAssign for AlignmentCounts {
    fn add_assign(&mut self, o: Self) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.ref_len += o.ref_len;
    }
}

/// Unit-cost Levenshtein alignment. On ties the backtrace prefers
/// substitution (or match), then deletion, then insertion.
pub fn wer_align<S: PartialEq>(reference: &[S], hypothesis: &[S]) -> AlignmentCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut dp = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        dp[i * w] = i;
    }
    for j in 0..=m {
        dp[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            dp[i * w + j] = sub.min(dp[(i - 1) * w + j] + 1).min(dp[i * w + j - 1] + 1);
        }
    }
    let mut counts = AlignmentCounts {
        ref_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 {
            let differ = reference[i - 1] != hypothesis[j - 1];
            if dp[(i - 1) * w + j - 1] + usize::from(differ) == here {
                counts.substitutions += usize::from(differ);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[(i - 1) * w + j] + 1 == here {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

/// Corpus totals alongside per-utterance rates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WerSummary {
    pub totals: AlignmentCounts,
    pub utterances: Vec<AlignmentCounts>,
}

impl WerSummary {
    pub fn push(&mut self, c: AlignmentCounts) {
        self.totals += c;
        self.utterances.push(c);
    }

    /// Corpus-level WER in percent.
    pub fn wer_percent(&self) -> f64 {
        self.totals.wer().map_or(f64::INFINITY, |w| 100.0 * w)
    }

    /// Corpus-level S, D, I as percentages of the total reference length.
    pub fn sdi_percent(&self) -> [f64; 3] {
        let n = self.totals.ref_len.max(1) as f64;
        [
            100.0 * self.totals.substitutions as f64 / n,
            100.0 * self.totals.deletions as f64 / n,
            100.0 * self.totals.insertions as f64 / n,
        ]
    }

    /// Mean over utterances of per-utterance S, D, I and WER rates (percent),
    /// skipping empty references.
    pub fn per_utterance_means(&self) -> [f64; 4] {
        let valid: Vec<&AlignmentCounts> = self.utterances.iter().filter(|c| c.ref_len > 0).collect();
        if valid.is_empty() {
            return [0.0; 4];
        }
        let mut acc = [0.0; 4];
        for c in &valid {
            let n = c.ref_len as f64;
            acc[0] += c.substitutions as f64 / n;
            acc[1] += c.deletions as f64 / n;
            acc[2] += c.insertions as f64 / n;
            acc[3] += c.errors() as f64 / n;
        }
        acc.map(|v| 100.0 * v / valid.len() as f64)
    }
}

impl fmt::Display for WerSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [s, d, i] = self.sdi_percent();
        write!(f, "S {s:.3}  D {d:.3}  I {i:.3}  WER {:.3}", self.wer_percent())
    }
}

pub const SI_SDR_CAP_DB: f64 = 120.0;

/// Scale-invariant SDR in dB after removing the mean of both signals.
pub fn si_sdr(reference: &[f32], estimate: &[f32]) -> Result<f64, MetricError> {
    if reference.len() != estimate.len() {
        return Err(MetricError::LengthMismatch(reference.len(), estimate.len()));
    }
    let centered = |x: &[f32]| -> Vec<f64> {
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / x.len().max(1) as f64;
        x.iter().map(|&v| v as f64 - mean).collect()
    };
    let (r, e) = (centered(reference), centered(estimate));
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Err(MetricError::ZeroReference);
    }
    let alpha = r.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / rr;
    let (mut target, mut residual) = (0.0, 0.0);
    for (a, b) in r.iter().zip(&e) {
        let s = alpha * a;
        target += s * s;
        residual += (b - s) * (b - s);
    }
    if residual == 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target / residual).log10()).min(SI_SDR_CAP_DB))
}
