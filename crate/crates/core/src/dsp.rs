//! STFT and log filterbank features.

use std::io::{Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("signal has {samples} samples, shorter than one {win}-sample window")]
    TooShort { samples: usize, win: usize },
    #[error("invalid frame parameters: {0}")]
    BadFrame(String),
    #[error("{q} filters requested but only {bins} FFT bins are available")]
    TooManyFilters { q: usize, bins: usize },
    #[error("invalid filterbank: {0}")]
    BadFilterbank(String),
    #[error("feature dump: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DspError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Framing in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameParams {
    pub win_len: usize,
    pub hop: usize,
    pub n_fft: usize,
}

impl Default for FrameParams {
    /// 32 ms Hann window, 8 ms hop, 512-point FFT at 16 kHz.
    fn default() -> Self {
        Self {
            win_len: 512,
            hop: 128,
            n_fft: 512,
        }
    }
}

impl FrameParams {
    pub fn from_ms(sample_rate: u32, win_ms: f64, hop_ms: f64, n_fft: usize) -> Result<Self> {
        let to_samples = |ms: f64| (ms * sample_rate as f64 / 1000.0).round() as usize;
        let p = Self {
            win_len: to_samples(win_ms),
            hop: to_samples(hop_ms),
            n_fft,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.win_len == 0 || self.hop == 0 {
            return Err(DspError::BadFrame(format!("window {} and hop {} must be positive", self.win_len, self.hop)));
        }
        if self.win_len > self.n_fft {
            return Err(DspError::BadFrame(format!("window {} exceeds n_fft {}", self.win_len, self.n_fft)));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn num_frames(&self, samples: usize) -> Option<usize> {
        (samples >= self.win_len).then(|| 1 + (samples - self.win_len) / self.hop)
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// One-sided complex spectrogram, row-major `(frames, bins)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub values: Vec<Complex<f64>>,
    pub params: FrameParams,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn frame(&self, f: usize) -> &[Complex<f64>] {
        &self.values[f * self.bins..(f + 1) * self.bins]
    }

    pub fn power(&self) -> Vec<f64> {
        self.values.iter().map(|c| c.norm_sqr()).collect()
    }
}

/// Hann-windowed STFT without centering; frames start at multiples of `hop`.
pub fn stft(w: &Waveform, params: FrameParams) -> Result<Spectrogram> {
    params.validate()?;
    let frames = params.num_frames(w.samples.len()).ok_or(DspError::TooShort {
        samples: w.samples.len(),
        win: params.win_len,
    })?;
    let bins = params.bins();
    let window = hann(params.win_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(params.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); params.n_fft];
    let mut values = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        let start = f * params.hop;
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (n, (b, &s)) in buf.iter_mut().zip(&w.samples[start..start + params.win_len]).enumerate() {
            b.re = s as f64 * window[n];
        }
        fft.process(&mut buf);
        values.extend_from_slice(&buf[..bins]);
    }
    Ok(Spectrogram {
        frames,
        bins,
        values,
        params,
        sample_rate: w.sample_rate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FreqScale {
    #[default]
    Mel,
    Bark,
}

impl FreqScale {
    pub fn from_hz(self, f: f64) -> f64 {
        match self {
            FreqScale::Mel => 2595.0 * (1.0 + f / 700.0).log10(),
            FreqScale::Bark => 26.81 * f / (1960.0 + f) - 0.53,
        }
    }

    pub fn to_hz(self, z: f64) -> f64 {
        match self {
            FreqScale::Mel => 700.0 * (10f64.powf(z / 2595.0) - 1.0),
            FreqScale::Bark => 1960.0 * (z + 0.53) / (26.28 - z),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterbankConfig {
    pub n_filters: usize,
    pub f_min: f64,
    /// `None` means Nyquist.
    pub f_max: Option<f64>,
    pub scale: FreqScale,
    pub floor_eps: f64,
}

impl Default for FilterbankConfig {
    fn default() -> Self {
        Self {
            n_filters: 80,
            f_min: 0.0,
            f_max: None,
            scale: FreqScale::Mel,
            floor_eps: 1e-10,
        }
    }
}

/// Triangular filters, row-major `(n_filters, bins)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Filterbank {
    pub weights: Vec<f64>,
    pub n_filters: usize,
    pub bins: usize,
    pub centers_hz: Vec<f64>,
}

impl Filterbank {
    pub fn new(sample_rate: u32, n_fft: usize, cfg: &FilterbankConfig) -> Result<Self> {
        let bins = n_fft / 2 + 1;
        let q = cfg.n_filters;
        if q == 0 {
            return Err(DspError::BadFilterbank("need at least one filter".into()));
        }
        if q > bins {
            return Err(DspError::TooManyFilters { q, bins });
        }
        let nyquist = sample_rate as f64 / 2.0;
        let f_max = cfg.f_max.unwrap_or(nyquist);
        if !(cfg.f_min >= 0.0 && cfg.f_min < f_max && f_max <= nyquist) {
            return Err(DspError::BadFilterbank(format!("band [{}, {f_max}] outside [0, {nyquist}]", cfg.f_min)));
        }
        let (lo, hi) = (cfg.scale.from_hz(cfg.f_min), cfg.scale.from_hz(f_max));
        let edges: Vec<f64> = (0..q + 2)
            .map(|i| cfg.scale.to_hz(lo + (hi - lo) * i as f64 / (q + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let mut weights = vec![0.0; q * bins];
        for (i, row) in weights.chunks_mut(bins).enumerate() {
            let (l, c, r) = (edges[i], edges[i + 1], edges[i + 2]);
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                *w = ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0);
            }
        }
        Ok(Self {
            weights,
            n_filters: q,
            bins,
            centers_hz: edges[1..=q].to_vec(),
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.bins..(i + 1) * self.bins]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.weights.chunks(self.bins).map(|r| r.iter().sum()).collect()
    }
}

/// Log filterbank energies, row-major `(frames, n_bins)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogFbank {
    pub values: Vec<f32>,
    pub frames: usize,
    pub n_bins: usize,
    pub params: FrameParams,
    pub sample_rate: u32,
}

impl LogFbank {
    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.n_bins..(t + 1) * self.n_bins]
    }

    pub fn get(&self, t: usize, q: usize) -> f32 {
        self.values[t * self.n_bins + q]
    }
}

/// `log(max(fb · |spec|², floor_eps))`.
pub fn log_fbank(spec: &Spectrogram, fb: &Filterbank, floor_eps: f64) -> Result<LogFbank> {
    if fb.bins != spec.bins {
        return Err(DspError::BadFilterbank(format!(
            "filterbank has {} bins, spectrogram has {}",
            fb.bins, spec.bins
        )));
    }
    let power = spec.power();
    let mut values = Vec::with_capacity(spec.frames * fb.n_filters);
    for frame in power.chunks(spec.bins) {
        for i in 0..fb.n_filters {
            let e: f64 = fb.row(i).iter().zip(frame).map(|(w, p)| w * p).sum();
            values.push(e.max(floor_eps).ln() as f32);
        }
    }
    Ok(LogFbank {
        values,
        frames: spec.frames,
        n_bins: fb.n_filters,
        params: spec.params,
        sample_rate: spec.sample_rate,
    })
}

/// Feature extractor with a cached filterbank.
#[derive(Debug, Clone)]
pub struct FbankExtractor {
    pub params: FrameParams,
    pub filterbank: Filterbank,
    pub floor_eps: f64,
    pub sample_rate: u32,
    /// Samples are multiplied by this before analysis.
    pub input_scale: f64,
}

impl FbankExtractor {
    pub fn new(sample_rate: u32, params: FrameParams, cfg: &FilterbankConfig) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            filterbank: Filterbank::new(sample_rate, params.n_fft, cfg)?,
            floor_eps: cfg.floor_eps,
            sample_rate,
            input_scale: 1.0,
        })
    }

    pub fn with_input_scale(mut self, scale: f64) -> Self {
        self.input_scale = scale;
        self
    }

    pub fn extract(&self, w: &Waveform) -> Result<LogFbank> {
        if w.sample_rate != self.sample_rate {
            return Err(DspError::BadFrame(format!(
                "waveform at {} Hz, extractor expects {} Hz",
                w.sample_rate, self.sample_rate
            )));
        }
        let spec = if self.input_scale == 1.0 {
            stft(w, self.params)?
        } else {
            let scale = self.input_scale as f32;
            let scaled = Waveform::new(w.samples.iter().map(|&v| v * scale).collect(), w.sample_rate);
            stft(&scaled, self.params)?
        };
        log_fbank(&spec, &self.filterbank, self.floor_eps)
    }
}

const DUMP_MAGIC: &[u8; 8] = b"MCGFEAT\0";
const DUMP_VERSION: u32 = 1;

pub fn write_dump(feats: &LogFbank, mut out: impl Write) -> Result<()> {
    out.write_all(DUMP_MAGIC)?;
    out.write_all(&DUMP_VERSION.to_le_bytes())?;
    for v in [feats.frames as u64, feats.n_bins as u64] {
        out.write_all(&v.to_le_bytes())?;
    }
    for v in [
        feats.sample_rate,
        feats.params.win_len as u32,
        feats.params.hop as u32,
        feats.params.n_fft as u32,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    for v in &feats.values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_dump(mut input: impl Read) -> Result<LogFbank> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(DspError::Format("bad magic".into()));
    }
    let mut u32s = |n: usize| -> Result<Vec<u32>> {
        let mut b = vec![0u8; 4 * n];
        input.read_exact(&mut b)?;
        Ok(b.chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let version = u32s(1)?[0];
    if version != DUMP_VERSION {
        return Err(DspError::Format(format!("unsupported version {version}")));
    }
    let dims = u32s(4)?;
    let frames = (dims[0] as u64 | (dims[1] as u64) << 32) as usize;
    let n_bins = (dims[2] as u64 | (dims[3] as u64) << 32) as usize;
    let meta = u32s(4)?;
    let mut raw = Vec::new();
    input.read_to_end(&mut raw)?;
    if raw.len() != frames * n_bins * 4 {
        return Err(DspError::Format(format!(
            "expected {} value bytes, found {}",
            frames * n_bins * 4,
            raw.len()
        )));
    }
    Ok(LogFbank {
        values: raw.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        frames,
        n_bins,
        params: FrameParams {
            win_len: meta[1] as usize,
            hop: meta[2] as usize,
            n_fft: meta[3] as usize,
        },
        sample_rate: meta[0],
    })
}

pub fn save_dump(feats: &LogFbank, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_dump(feats, std::io::BufWriter::new(f))
}

pub fn load_dump(path: &Path) -> Result<LogFbank> {
    read_dump(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, n: usize, sr: u32) -> Waveform {
        let s = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin() as f32)
            .collect();
        Waveform::new(s, sr)
    }

    #[test]
    fn frame_count_follows_framing_formula() {
        let p = FrameParams::default();
        let spec = stft(&Waveform::new(vec![0.0; 512 + 3 * 128 + 5], 16000), p).unwrap();
        assert_eq!(spec.frames, 4);
        assert_eq!(spec.bins, 257);
    }

    #[test]
    fn short_signal_is_rejected() {
        let err = stft(&Waveform::new(vec![0.0; 511], 16000), FrameParams::default()).unwrap_err();
        assert!(matches!(err, DspError::TooShort { samples: 511, win: 512 }));
    }

    #[test]
    fn zero_signal_gives_zero_spectrum_and_floor_features() {
        let w = Waveform::new(vec![0.0; 2000], 16000);
        let spec = stft(&w, FrameParams::default()).unwrap();
        assert!(spec.values.iter().all(|c| c.norm() == 0.0));
        let ex = FbankExtractor::new(16000, FrameParams::default(), &FilterbankConfig::default()).unwrap();
        let feats = ex.extract(&w).unwrap();
        let floor = (1e-10f64).ln() as f32;
        assert!(feats.values.iter().all(|&v| v == floor));
    }

    #[test]
    fn stft_is_linear_in_scale() {
        let w = tone(440.0, 3000, 16000);
        let scaled = Waveform::new(w.samples.iter().map(|s| s * 0.5).collect(), 16000);
        let a = stft(&w, FrameParams::default()).unwrap();
        let b = stft(&scaled, FrameParams::default()).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x * 0.5 - y).norm() < 1e-9);
        }
    }

    #[test]
    fn bin_centered_tone_matches_closed_form_hann_spectrum() {
        // periodic Hann turns a bin-centered cosine into three lines: N/4 at k, N/8 at k +- 1
        let (k, n) = (20usize, 512usize);
        let s = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64).cos() as f32)
            .collect();
        let spec = stft(&Waveform::new(s, 16000), FrameParams::default()).unwrap();
        let frame = spec.frame(0);
        let mags: Vec<f64> = frame.iter().map(|c| c.norm()).collect();
        assert!((mags[k] - n as f64 / 4.0).abs() < 1e-3);
        assert!((mags[k - 1] - n as f64 / 8.0).abs() < 1e-3);
        assert!((mags[k + 1] - n as f64 / 8.0).abs() < 1e-3);
        let total: f64 = frame.iter().map(|c| c.norm_sqr()).sum();
        let lobe: f64 = frame[k - 1..=k + 1].iter().map(|c| c.norm_sqr()).sum();
        assert!(lobe / total >= 0.99);
        let peak = mags.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(peak, k);
    }

    #[test]
    fn too_many_filters_is_an_error() {
        let cfg = FilterbankConfig {
            n_filters: 300,
            ..Default::default()
        };
        assert!(matches!(
            Filterbank::new(16000, 512, &cfg),
            Err(DspError::TooManyFilters { q: 300, bins: 257 })
        ));
    }

    #[test]
    fn bark_scale_round_trips() {
        for f in [0.0, 100.0, 1000.0, 7999.0] {
            let z = FreqScale::Bark.from_hz(f);
            assert!((FreqScale::Bark.to_hz(z) - f).abs() < 1e-9);
        }
        let cfg = FilterbankConfig {
            n_filters: 24,
            scale: FreqScale::Bark,
            ..Default::default()
        };
        let fb = Filterbank::new(16000, 512, &cfg).unwrap();
        assert!(fb.row_sums().iter().all(|&s| s > 0.0));
        assert!(fb.centers_hz.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn dump_round_trip() {
        let ex = FbankExtractor::new(16000, FrameParams::default(), &FilterbankConfig::default()).unwrap();
        let feats = ex.extract(&tone(300.0, 4000, 16000)).unwrap();
        let mut buf = Vec::new();
        write_dump(&feats, &mut buf).unwrap();
        assert_eq!(read_dump(buf.as_slice()).unwrap(), feats);
        buf[0] = b'X';
        assert!(read_dump(buf.as_slice()).is_err());
    }
}
