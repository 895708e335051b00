//! Toy corpus synthesis, SNR-controlled mixing, manifests and batching.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformer::frame_mask;
use crate::dsp::{DspError, FbankExtractor, LogFbank, Waveform};
use crate::labels::{make_gate_labels, CorpusStats, LabelError, StatsAccumulator, ThresholdSet};
use crate::numerics::element::Element;
use crate::numerics::rng::Rng;
use crate::numerics::Tensor;
use crate::wav::{quantize_16bit, read_wav, write_wav, WavError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("{path}:{line}: {msg}")]
    Manifest { path: String, line: usize, msg: String },
    #[error("{0} signal has zero power")]
    ZeroPower(&'static str),
    #[error("sample rates differ: {0} Hz vs {1} Hz")]
    SampleRate(u32, u32),
    #[error("{0}")]
    Empty(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One manifest line.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub wav: PathBuf,
    pub tokens: Vec<usize>,
    pub noise: Option<String>,
}

/// Tab-separated `id, wav, tokens[, noise]`. Relative wav paths resolve
/// against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<Record>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let err = |line: usize, msg: String| DataError::Manifest {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&cols.len()) {
            return Err(err(i + 1, format!("expected 3 or 4 tab-separated columns, found {}", cols.len())));
        }
        let tokens = cols[2]
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| err(i + 1, format!("bad token id: {e}")))?;
        if tokens.is_empty() || tokens.contains(&0) {
            return Err(err(i + 1, "transcript must be non-empty ids >= 1".into()));
        }
        records.push(Record {
            id: cols[0].to_string(),
            wav: base.join(cols[1]),
            tokens,
            noise: cols.get(3).map(|s| s.to_string()),
        });
    }
    Ok(records)
}

/// Writes `records` with wav paths relative to the manifest's directory when possible.
pub fn write_manifest(path: &Path, records: &[Record]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = String::new();
    for r in records {
        let wav = r.wav.strip_prefix(base).unwrap_or(&r.wav);
        let tokens: Vec<String> = r.tokens.iter().map(|t| t.to_string()).collect();
        write!(out, "{}\t{}\t{}", r.id, wav.display(), tokens.join(" ")).unwrap();
        if let Some(n) = &r.noise {
            write!(out, "\t{n}").unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Tab-separated `id, wav` noise list.
pub fn read_noise_manifest(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| match l.split('\t').collect::<Vec<_>>()[..] {
            [id, wav] => Ok((id.to_string(), base.join(wav))),
            _ => Err(DataError::Manifest {
                path: path.display().to_string(),
                line: i + 1,
                msg: "expected `id<TAB>wav`".into(),
            }),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub sample_rate: u32,
    pub noise_secs: f64,
    /// Level of the white recording floor added to clean utterances.
    pub floor_dbfs: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab_size: 6,
            train: 8,
            dev: 4,
            test: 8,
            min_tokens: 2,
            max_tokens: 4,
            sample_rate: 16000,
            noise_secs: 4.0,
            floor_dbfs: -70.0,
        }
    }
}

pub const TOKEN_SECS: f64 = 0.12;
pub const GAP_SECS: f64 = 0.04;
pub const EDGE_SECS: f64 = 0.08;

/// Per-utterance variation applied to every token template.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub pitch: f64,
    pub amplitude: f64,
    pub duration: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            pitch: 1.0,
            amplitude: 0.25,
            duration: 1.0,
        }
    }
}

impl Jitter {
    pub fn draw(rng: &mut Rng) -> Self {
        Self {
            pitch: rng.uniform_range(0.97, 1.03),
            amplitude: rng.uniform_range(0.18, 0.32),
            duration: rng.uniform_range(0.9, 1.1),
        }
    }
}

/// Two-partial tone with a token-specific glide under a Hann envelope.
pub fn token_template(token: usize, sample_rate: u32, jitter: Jitter) -> Vec<f32> {
    let k = token as f64;
    let f1 = (250.0 + 210.0 * (k - 1.0)) * jitter.pitch;
    let f2 = (1300.0 + 530.0 * ((token * 5) % 7) as f64) * jitter.pitch;
    let glide = if token % 2 == 0 { 1.25 } else { 0.8 };
    let n = (TOKEN_SECS * jitter.duration * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    let (mut p1, mut p2) = (0.0f64, 0.0f64);
    (0..n)
        .map(|i| {
            let frac = i as f64 / n as f64;
            let bend = 1.0 + (glide - 1.0) * frac;
            p1 += 2.0 * PI * f1 * bend / sr;
            p2 += 2.0 * PI * f2 / sr;
            let env = 0.5 - 0.5 * (2.0 * PI * frac).cos();
            (jitter.amplitude * env * (0.7 * p1.sin() + 0.3 * p2.sin())) as f32
        })
        .collect()
}

/// Sample ranges `[start, end)` of each token in a synthesized utterance.
pub type Segments = Vec<(usize, usize)>;

pub fn synth_utterance(tokens: &[usize], sample_rate: u32, jitter: Jitter) -> (Waveform, Segments) {
    let sr = sample_rate as f64;
    let edge = (EDGE_SECS * sr) as usize;
    let gap = (GAP_SECS * sr * jitter.duration) as usize;
    let mut samples = vec![0.0f32; edge];
    let mut segments = Vec::with_capacity(tokens.len());
    for (i, &t) in tokens.iter().enumerate() {
        if i > 0 {
            samples.extend(std::iter::repeat_n(0.0, gap));
        }
        let tpl = token_template(t, sample_rate, jitter);
        segments.push((samples.len(), samples.len() + tpl.len()));
        samples.extend(tpl);
    }
    samples.extend(std::iter::repeat_n(0.0, edge));
    quantize_16bit(&mut samples);
    (Waveform::new(samples, sample_rate), segments)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    Babble,
}

/// Stationary white noise or a babble-like mix of low-passed noise and
/// overlapping random tone streams.
pub fn synth_noise(kind: NoiseKind, secs: f64, sample_rate: u32, vocab: usize, rng: &mut Rng) -> Waveform {
    let n = (secs * sample_rate as f64) as usize;
    let mut s: Vec<f32> = match kind {
        NoiseKind::White => (0..n).map(|_| (0.1 * rng.normal()) as f32).collect(),
        NoiseKind::Babble => {
            let mut y = 0.0;
            let mut s: Vec<f32> = (0..n)
                .map(|_| {
                    y = 0.9 * y + 0.1 * rng.normal();
                    (0.15 * y) as f32
                })
                .collect();
            for _ in 0..6 {
                let mut pos = rng.below(sample_rate as usize / 4);
                while pos < n {
                    let tok = 1 + rng.below(vocab.max(1));
                    let mut jit = Jitter::draw(rng);
                    jit.pitch *= rng.uniform_range(0.7, 1.4);
                    jit.amplitude *= 0.4;
                    for (i, v) in token_template(tok, sample_rate, jit).into_iter().enumerate() {
                        if pos + i < n {
                            s[pos + i] += v;
                        }
                    }
                    pos += (rng.uniform_range(0.1, 0.3) * sample_rate as f64) as usize;
                }
            }
            s
        }
    };
    quantize_16bit(&mut s);
    Waveform::new(s, sample_rate)
}

/// Paths of a synthesized corpus.
#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub root: PathBuf,
}

impl CorpusPaths {
    pub fn manifest(&self, split: &str) -> PathBuf {
        self.root.join(format!("{split}.tsv"))
    }

    /// Test mixtures draw from held-out noise files.
    pub fn noise_manifest(&self, split: &str) -> PathBuf {
        let which = if split == "test" { "test" } else { "train" };
        self.root.join(format!("noise_{which}.tsv"))
    }
}

pub fn synth_toy_corpus(cfg: &SynthConfig, out: &Path) -> Result<CorpusPaths> {
    if cfg.vocab_size == 0 || cfg.min_tokens == 0 || cfg.min_tokens > cfg.max_tokens {
        return Err(DataError::Empty(format!(
            "invalid synth config: vocab {} tokens {}..={}",
            cfg.vocab_size, cfg.min_tokens, cfg.max_tokens
        )));
    }
    std::fs::create_dir_all(out.join("wav"))?;
    std::fs::create_dir_all(out.join("noise"))?;
    for (s_idx, (split, count)) in [("train", cfg.train), ("dev", cfg.dev), ("test", cfg.test)].into_iter().enumerate() {
        let mut records = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = Rng::derive(cfg.seed, &[1, s_idx as u64, i as u64]);
            let len = cfg.min_tokens + rng.below(cfg.max_tokens - cfg.min_tokens + 1);
            let tokens: Vec<usize> = (0..len).map(|_| 1 + rng.below(cfg.vocab_size)).collect();
            let (mut wave, _) = synth_utterance(&tokens, cfg.sample_rate, Jitter::draw(&mut rng));
            let floor = 10f64.powf(cfg.floor_dbfs / 20.0);
            for s in &mut wave.samples {
                *s += (floor * rng.normal()) as f32;
            }
            let id = format!("{split}{i:04}");
            let wav = out.join("wav").join(format!("{id}.wav"));
            write_wav(&wav, &wave)?;
            records.push(Record {
                id,
                wav,
                tokens,
                noise: None,
            });
        }
        write_manifest(&out.join(format!("{split}.tsv")), &records)?;
    }
    for (n_idx, which) in ["train", "test"].into_iter().enumerate() {
        let mut lines = String::new();
        for (k_idx, (kind, name)) in [(NoiseKind::White, "white"), (NoiseKind::Babble, "babble")].into_iter().enumerate() {
            let mut rng = Rng::derive(cfg.seed, &[2, n_idx as u64, k_idx as u64]);
            let wave = synth_noise(kind, cfg.noise_secs, cfg.sample_rate, cfg.vocab_size, &mut rng);
            let id = format!("{name}_{which}");
            write_wav(&out.join("noise").join(format!("{id}.wav")), &wave)?;
            writeln!(lines, "{id}\tnoise/{id}.wav").unwrap();
        }
        std::fs::write(out.join(format!("noise_{which}.tsv")), lines)?;
    }
    Ok(CorpusPaths { root: out.to_path_buf() })
}

/// How a clean utterance is combined with noise.
#[derive(Debug, Clone, PartialEq)]
pub struct MixSpec {
    pub snr_db: f64,
    pub noise_index: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub noisy: Waveform,
    /// Clean signal after the shared peak-normalization gain.
    pub clean: Waveform,
    /// Scaled noise actually added, after the same gain.
    pub noise: Waveform,
    pub gain: f64,
    /// The noise was shorter than the clip and wrapped around.
    pub looped: bool,
}

pub const PEAK_LIMIT: f64 = 0.99;

fn power(x: &[f32]) -> f64 {
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len().max(1) as f64
}

/// `10 log10(P_clean / P_noise)` over the whole clip.
pub fn measured_snr_db(clean: &[f32], noise: &[f32]) -> f64 {
    10.0 * (power(clean) / power(noise)).log10()
}

pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, spec: &MixSpec) -> Result<Mixture> {
    if clean.sample_rate != noise.sample_rate {
        return Err(DataError::SampleRate(clean.sample_rate, noise.sample_rate));
    }
    let n = clean.samples.len();
    let looped = spec.offset + n > noise.samples.len();
    let crop: Vec<f64> = (0..n)
        .map(|i| noise.samples[(spec.offset + i) % noise.samples.len()] as f64)
        .collect();
    let p_clean = power(&clean.samples);
    let p_noise = crop.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64;
    if p_clean == 0.0 {
        return Err(DataError::ZeroPower("clean"));
    }
    if p_noise == 0.0 {
        return Err(DataError::ZeroPower("noise"));
    }
    let scale = (p_clean / (p_noise * 10f64.powf(spec.snr_db / 10.0))).sqrt();
    let peak = clean
        .samples
        .iter()
        .zip(&crop)
        .map(|(&c, &z)| (c as f64 + scale * z).abs())
        .fold(0.0, f64::max);
    let gain = if peak > PEAK_LIMIT { PEAK_LIMIT / peak } else { 1.0 };
    let clean_out: Vec<f32> = clean.samples.iter().map(|&c| (gain * c as f64) as f32).collect();
    let noise_out: Vec<f32> = crop.iter().map(|&z| (gain * scale * z) as f32).collect();
    let noisy: Vec<f32> = clean
        .samples
        .iter()
        .zip(&crop)
        .map(|(&c, &z)| (gain * (c as f64 + scale * z)) as f32)
        .collect();
    let sr = clean.sample_rate;
    Ok(Mixture {
        noisy: Waveform::new(noisy, sr),
        clean: Waveform::new(clean_out, sr),
        noise: Waveform::new(noise_out, sr),
        gain,
        looped,
    })
}

/// Noise applied when building batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NoiseCondition {
    Clean,
    Fixed { snr_db: f64 },
    Uniform { min_db: f64, max_db: f64 },
}

impl NoiseCondition {
    pub fn label(&self) -> String {
        match self {
            NoiseCondition::Clean => "clean".into(),
            NoiseCondition::Fixed { snr_db } => format!("{snr_db}dB"),
            NoiseCondition::Uniform { min_db, max_db } => format!("{min_db}..{max_db}dB"),
        }
    }
}

/// Clean waveforms of one split plus its noise pool, held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub clean: Vec<Waveform>,
    pub noise_ids: Vec<String>,
    pub noises: Vec<Waveform>,
}

impl Dataset {
    pub fn load(manifest: &Path, noise_manifest: Option<&Path>) -> Result<Self> {
        let records = read_manifest(manifest)?;
        let clean = records.iter().map(|r| read_wav(&r.wav)).collect::<std::result::Result<Vec<_>, _>>()?;
        let (noise_ids, noises) = match noise_manifest {
            Some(p) => {
                let list = read_noise_manifest(p)?;
                let waves = list.iter().map(|(_, w)| read_wav(w)).collect::<std::result::Result<Vec<_>, _>>()?;
                (list.into_iter().map(|(id, _)| id).collect(), waves)
            }
            None => (Vec::new(), Vec::new()),
        };
        Ok(Self {
            records,
            clean,
            noise_ids,
            noises,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn max_token(&self) -> usize {
        self.records.iter().flat_map(|r| r.tokens.iter().copied()).max().unwrap_or(0)
    }

    /// Statistics over the clean features of every clip.
    pub fn corpus_stats(&self, extractor: &FbankExtractor) -> Result<CorpusStats> {
        let mut acc = StatsAccumulator::default();
        for w in &self.clean {
            acc.push(&extractor.extract(w)?)?;
        }
        Ok(acc.finish()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatcherConfig {
    pub batch_size: usize,
    pub seed: u64,
    pub max_frames: usize,
    /// Fresh noise every epoch; otherwise every epoch reuses epoch 0's mixtures.
    pub redraw_noise: bool,
    pub shuffle: bool,
    pub condition: NoiseCondition,
}

impl Default for BatcherConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            seed: 0,
            max_frames: 2000,
            redraw_noise: true,
            shuffle: true,
            condition: NoiseCondition::Uniform {
                min_db: -5.0,
                max_db: 20.0,
            },
        }
    }
}

/// Padded batch; features are row-major `(B, T, Q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub tokens: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
    pub frames: usize,
    pub n_bins: usize,
    pub noisy: Vec<f32>,
    pub clean: Vec<f32>,
    /// One binary `(B, T, Q)` map per threshold.
    pub labels: Vec<Vec<f32>>,
    pub mixes: Vec<Option<MixSpec>>,
}

pub struct BatchTensors<T: Element> {
    pub noisy: Tensor<T>,
    pub clean: Tensor<T>,
    pub labels: Vec<Tensor<T>>,
    /// `(B, T, 1)` frame validity.
    pub mask: Tensor<T>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn tensors<T: Element>(&self) -> BatchTensors<T> {
        let shape = [self.len(), self.frames, self.n_bins];
        let conv = |v: &[f32]| Tensor::from_vec(v.iter().map(|&x| T::from_f64(x as f64)).collect(), &shape).expect("batch shape");
        BatchTensors {
            noisy: conv(&self.noisy),
            clean: conv(&self.clean),
            labels: self.labels.iter().map(|l| conv(l)).collect(),
            mask: frame_mask(&self.lengths, self.frames),
        }
    }
}

/// Deterministic epoch iterator over a dataset.
pub struct Batcher<'a> {
    pub dataset: &'a Dataset,
    pub extractor: &'a FbankExtractor,
    pub thresholds: &'a ThresholdSet,
    pub config: BatcherConfig,
    usable: Vec<usize>,
}

const SHUFFLE_TAG: u64 = 0x5348_5546;
const MIX_TAG: u64 = 0x4d49_58;

impl<'a> Batcher<'a> {
    pub fn new(
        dataset: &'a Dataset,
        extractor: &'a FbankExtractor,
        thresholds: &'a ThresholdSet,
        config: BatcherConfig,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(DataError::Empty("manifest has no utterances".into()));
        }
        if config.batch_size == 0 {
            return Err(DataError::Empty("batch size must be positive".into()));
        }
        if config.condition != NoiseCondition::Clean && dataset.noises.is_empty() {
            return Err(DataError::Empty("noisy condition requested but no noise files loaded".into()));
        }
        let usable: Vec<usize> = (0..dataset.len())
            .filter(|&i| {
                extractor.params.num_frames(dataset.clean[i].samples.len()).is_some_and(|t| t <= config.max_frames)
            })
            .collect();
        let skipped = dataset.len() - usable.len();
        if skipped > 0 {
            log::warn!("skipping {skipped} utterance(s) outside the 1..={} frame budget", config.max_frames);
        }
        if usable.is_empty() {
            return Err(DataError::Empty("every utterance exceeds the frame budget".into()));
        }
        Ok(Self {
            dataset,
            extractor,
            thresholds,
            config,
            usable,
        })
    }

    pub fn skipped(&self) -> usize {
        self.dataset.len() - self.usable.len()
    }

    /// Record indices in epoch order.
    pub fn order(&self, epoch: u64) -> Vec<usize> {
        let mut order = self.usable.clone();
        if self.config.shuffle {
            Rng::derive(self.config.seed, &[SHUFFLE_TAG, epoch]).shuffle(&mut order);
        }
        order
    }

    pub fn mix_spec(&self, epoch: u64, index: usize) -> Option<MixSpec> {
        let noise_epoch = if self.config.redraw_noise { epoch } else { 0 };
        let mut rng = Rng::derive(self.config.seed, &[MIX_TAG, noise_epoch, index as u64]);
        let snr_db = match self.config.condition {
            NoiseCondition::Clean => return None,
            NoiseCondition::Fixed { snr_db } => snr_db,
            NoiseCondition::Uniform { min_db, max_db } => rng.uniform_range(min_db, max_db),
        };
        let noise_index = rng.below(self.dataset.noises.len());
        let noise_len = self.dataset.noises[noise_index].samples.len();
        let clip_len = self.dataset.clean[index].samples.len();
        let offset = if noise_len > clip_len {
            rng.below(noise_len - clip_len + 1)
        } else {
            0
        };
        Some(MixSpec {
            snr_db,
            noise_index,
            offset,
        })
    }

    /// Clean and noisy features of one record for the given epoch.
    pub fn features(&self, epoch: u64, index: usize) -> Result<(LogFbank, LogFbank, Option<MixSpec>)> {
        let clean = &self.dataset.clean[index];
        let spec = self.mix_spec(epoch, index);
        let (noisy_w, clean_w) = match &spec {
            None => (clean.clone(), clean.clone()),
            Some(s) => {
                let m = mix_at_snr(clean, &self.dataset.noises[s.noise_index], s)?;
                (m.noisy, m.clean)
            }
        };
        Ok((self.extractor.extract(&noisy_w)?, self.extractor.extract(&clean_w)?, spec))
    }

    fn build(&self, epoch: u64, indices: &[usize]) -> Result<Batch> {
        let mut items = Vec::with_capacity(indices.len());
        for &i in indices {
            items.push((i, self.features(epoch, i)?));
        }
        let frames = items.iter().map(|(_, (n, _, _))| n.frames).max().unwrap_or(0);
        let q = self.extractor.filterbank.n_filters;
        let b = items.len();
        let mut batch = Batch {
            ids: Vec::with_capacity(b),
            tokens: Vec::with_capacity(b),
            lengths: Vec::with_capacity(b),
            frames,
            n_bins: q,
            noisy: vec![0.0; b * frames * q],
            clean: vec![0.0; b * frames * q],
            labels: vec![vec![0.0; b * frames * q]; self.thresholds.len()],
            mixes: Vec::with_capacity(b),
        };
        for (slot, (i, (noisy, clean, spec))) in items.into_iter().enumerate() {
            let rec = &self.dataset.records[i];
            let base = slot * frames * q;
            let n = noisy.frames * q;
            batch.noisy[base..base + n].copy_from_slice(&noisy.values);
            batch.clean[base..base + n].copy_from_slice(&clean.values);
            for (dst, label) in batch.labels.iter_mut().zip(make_gate_labels(&clean, self.thresholds)?) {
                for (d, &v) in dst[base..base + n].iter_mut().zip(&label.values) {
                    *d = v as f32;
                }
            }
            batch.ids.push(rec.id.clone());
            batch.tokens.push(rec.tokens.clone());
            batch.lengths.push(noisy.frames);
            batch.mixes.push(spec);
        }
        Ok(batch)
    }

    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Result<Batch>> + '_ {
        let order = self.order(epoch);
        let chunks: Vec<Vec<usize>> = order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |c| self.build(epoch, &c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(n: usize, f: f64) -> Waveform {
        Waveform::new((0..n).map(|i| (0.3 * (f * i as f64).sin()) as f32).collect(), 16000)
    }

    #[test]
    fn zero_db_gives_equal_rms() {
        let clean = tone(4000, 0.05);
        let noise = tone(8000, 0.31);
        let m = mix_at_snr(&clean, &noise, &MixSpec { snr_db: 0.0, noise_index: 0, offset: 17 }).unwrap();
        let rms = |x: &[f32]| power(x).sqrt();
        assert!((rms(&m.clean.samples) - rms(&m.noise.samples)).abs() < 1e-6);
        assert!(!m.looped);
    }

    #[test]
    fn high_snr_mixture_is_close_to_clean() {
        let (clean, _) = synth_utterance(&[1, 3, 2], 16000, Jitter::default());
        let noise = tone(20000, 0.31);
        let m = mix_at_snr(&clean, &noise, &MixSpec { snr_db: 60.0, noise_index: 0, offset: 0 }).unwrap();
        let peak = clean.samples.iter().fold(0.0f32, |a, &b| a.max(b.abs()));
        let diff = m.noisy.samples.iter().zip(&clean.samples).fold(0.0f32, |a, (x, y)| a.max((x - y).abs()));
        assert!(diff < 1e-3 * peak);
    }

    #[test]
    fn loud_mixture_is_peak_normalized_with_snr_preserved() {
        let clean = Waveform::new(vec![0.9; 1000], 16000);
        let noise = tone(1000, 0.7);
        let m = mix_at_snr(&clean, &noise, &MixSpec { snr_db: -5.0, noise_index: 0, offset: 0 }).unwrap();
        assert!(m.gain < 1.0);
        assert!(m.noisy.samples.iter().all(|v| v.abs() <= PEAK_LIMIT as f32 + 1e-6));
        assert!((measured_snr_db(&m.clean.samples, &m.noise.samples) + 5.0).abs() < 1e-4);
    }

    #[test]
    fn short_noise_loops_and_is_flagged() {
        let m = mix_at_snr(&tone(500, 0.1), &tone(100, 0.4), &MixSpec { snr_db: 5.0, noise_index: 0, offset: 50 }).unwrap();
        assert!(m.looped);
    }

    #[test]
    fn zero_power_inputs_are_errors() {
        let silent = Waveform::new(vec![0.0; 100], 16000);
        let spec = MixSpec { snr_db: 0.0, noise_index: 0, offset: 0 };
        assert!(matches!(mix_at_snr(&silent, &tone(100, 0.2), &spec), Err(DataError::ZeroPower("clean"))));
        assert!(matches!(mix_at_snr(&tone(100, 0.2), &silent, &spec), Err(DataError::ZeroPower("noise"))));
        let other_rate = Waveform::new(vec![0.1; 100], 8000);
        assert!(matches!(mix_at_snr(&tone(100, 0.2), &other_rate, &spec), Err(DataError::SampleRate(..))));
    }

    #[test]
    fn templates_differ_between_tokens() {
        let a = token_template(1, 16000, Jitter::default());
        let b = token_template(2, 16000, Jitter::default());
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-3));
    }
}
