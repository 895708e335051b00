//! Run configuration: presets, TOML files and `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformer::ConformerConfig;
use crate::data::{BatcherConfig, NoiseCondition};
use crate::dsp::{FbankExtractor, FilterbankConfig, FrameParams, FreqScale};
use crate::labels::validate_epsilons;
use crate::loss::LossWeights;
use crate::mcg::McgConfig;
use crate::numerics::optim::{AdamConfig, PlateauSchedule};

pub const OUTPUT_ROOT_ENV: &str = "MCGATE_OUTPUT_ROOT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(String),
    #[error("override `{0}`: expected section.key=value")]
    Override(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub preset: Preset,
    pub name: String,
    pub seed: u64,
    /// Falls back to the environment, then `runs`.
    pub output_root: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub corpus_dir: PathBuf,
    pub stats_file: Option<PathBuf>,
    pub batch_size: usize,
    pub max_frames: usize,
    pub redraw_noise: bool,
    /// Reshuffle the training order every epoch.
    pub shuffle: bool,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    /// Noisy evaluation conditions in addition to clean.
    pub eval_snrs_db: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSection {
    pub sample_rate: u32,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub f_min: f64,
    pub f_max: Option<f64>,
    pub scale: FreqScale,
    pub floor_eps: f64,
    /// 32768 analyses samples at 16-bit PCM scale.
    pub input_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PlateauMetric {
    #[default]
    Total,
    Ctc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_factor: f64,
    pub plateau_patience: u32,
    pub stop_patience: u32,
    pub max_epochs: u64,
    /// Global-norm clip; `None` or a non-positive value disables clipping.
    pub grad_clip: Option<f64>,
    pub plateau_metric: PlateauMetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// One epsilon list per cell.
    pub grid: Vec<Vec<f64>>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            grid: vec![vec![0.0], vec![-1.0, 1.0], vec![-1.0, 1.0, 2.0], vec![-2.0, -1.0, 1.0, 2.0]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub features: FeatureSection,
    pub mcg: McgConfig,
    pub asr: ConformerConfig,
    pub loss: LossWeights,
    pub optim: OptimSection,
    pub sweep: SweepSection,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Paper-scale model and optimizer constants.
    pub fn paper() -> Self {
        Self {
            run: RunSection {
                preset: Preset::Paper,
                name: "mcg".into(),
                seed: 0,
                output_root: None,
            },
            data: DataSection {
                corpus_dir: PathBuf::from("corpus"),
                stats_file: None,
                batch_size: 32,
                max_frames: 2000,
                redraw_noise: true,
                shuffle: true,
                snr_min_db: -5.0,
                snr_max_db: 20.0,
                eval_snrs_db: vec![0.0],
            },
            features: FeatureSection {
                sample_rate: 16000,
                win_ms: 32.0,
                hop_ms: 8.0,
                n_fft: 512,
                f_min: 0.0,
                f_max: None,
                scale: FreqScale::Mel,
                floor_eps: 1e-10,
                input_scale: 32768.0,
            },
            mcg: McgConfig::paper(),
            asr: ConformerConfig::paper(6),
            loss: LossWeights::default(),
            optim: OptimSection {
                learning_rate: 2e-4,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                decay_factor: 0.5,
                plateau_patience: 5,
                stop_patience: 20,
                max_epochs: 200,
                grad_clip: Some(5.0),
                plateau_metric: PlateauMetric::Total,
            },
            sweep: SweepSection::default(),
        }
    }

    /// Narrow model for single-core runs on the toy corpus.
    pub fn desk() -> Self {
        let mut c = Self::paper();
        c.run.preset = Preset::Desk;
        c.data.batch_size = 4;
        c.mcg = McgConfig::desk();
        c.asr = ConformerConfig::desk(6);
        c.optim.learning_rate = 2e-3;
        c.optim.max_epochs = 300;
        c
    }

    /// Reads a TOML file on top of the preset it names, then applies
    /// `section.key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                text.parse::<toml::Table>().map_err(|e| ConfigError::Parse(e.to_string()))?
            }
            None => toml::Table::new(),
        };
        Self::from_table(file, overrides)
    }

    pub fn from_table(mut file: toml::Table, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            apply_override(&mut file, o)?;
        }
        let preset = match file.get("run").and_then(|r| r.get("preset")) {
            Some(v) => v
                .clone()
                .try_into::<Preset>()
                .map_err(|e| ConfigError::Parse(format!("run.preset: {e}")))?,
            None => Preset::Desk,
        };
        let mut base = toml::Table::try_from(Self::preset(preset)).map_err(|e| ConfigError::Parse(e.to_string()))?;
        merge(&mut base, file);
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.mcg.validate().map_err(|e| ConfigError::Invalid(format!("mcg: {e}")))?;
        self.asr.validate().map_err(|e| ConfigError::Invalid(format!("asr: {e}")))?;
        validate_epsilons(&self.mcg.epsilons).map_err(|e| ConfigError::Invalid(format!("mcg: {e}")))?;
        if self.mcg.n_bins != self.asr.n_bins {
            return bad(format!("mcg.n_bins {} != asr.n_bins {}", self.mcg.n_bins, self.asr.n_bins));
        }
        if self.data.batch_size == 0 {
            return bad("data.batch_size must be positive".into());
        }
        if !(self.data.snr_min_db <= self.data.snr_max_db) {
            return bad("data.snr_min_db exceeds data.snr_max_db".into());
        }
        if !(self.optim.learning_rate > 0.0) || !(self.optim.decay_factor > 0.0 && self.optim.decay_factor <= 1.0) {
            return bad("optim.learning_rate must be positive and decay_factor in (0, 1]".into());
        }
        if !(self.features.input_scale > 0.0 && self.features.input_scale.is_finite()) {
            return bad("features.input_scale must be positive".into());
        }
        if self.loss.as_array().iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("loss weights must be finite and non-negative".into());
        }
        if self.sweep.grid.is_empty() {
            return bad("sweep.grid is empty".into());
        }
        for cell in &self.sweep.grid {
            validate_epsilons(cell).map_err(|e| ConfigError::Invalid(format!("sweep: {e}")))?;
        }
        self.extractor()?;
        Ok(())
    }

    pub fn frame_params(&self) -> Result<FrameParams> {
        let f = &self.features;
        FrameParams::from_ms(f.sample_rate, f.win_ms, f.hop_ms, f.n_fft).map_err(|e| ConfigError::Invalid(format!("features: {e}")))
    }

    pub fn extractor(&self) -> Result<FbankExtractor> {
        let f = &self.features;
        let fb = FilterbankConfig {
            n_filters: self.mcg.n_bins,
            f_min: f.f_min,
            f_max: f.f_max,
            scale: f.scale,
            floor_eps: f.floor_eps,
        };
        FbankExtractor::new(f.sample_rate, self.frame_params()?, &fb)
            .map(|ex| ex.with_input_scale(f.input_scale))
            .map_err(|e| ConfigError::Invalid(format!("features: {e}")))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.optim.learning_rate,
            beta1: self.optim.beta1,
            beta2: self.optim.beta2,
            eps: self.optim.eps,
        }
    }

    pub fn schedule(&self) -> PlateauSchedule {
        let o = &self.optim;
        PlateauSchedule::new(o.learning_rate, o.decay_factor, o.plateau_patience, o.stop_patience)
    }

    pub fn train_batcher(&self) -> BatcherConfig {
        BatcherConfig {
            batch_size: self.data.batch_size,
            seed: self.run.seed,
            max_frames: self.data.max_frames,
            redraw_noise: self.data.redraw_noise,
            shuffle: self.data.shuffle,
            condition: NoiseCondition::Uniform {
                min_db: self.data.snr_min_db,
                max_db: self.data.snr_max_db,
            },
        }
    }

    /// Fixed mixtures in corpus order for validation and evaluation.
    pub fn eval_batcher(&self, condition: NoiseCondition) -> BatcherConfig {
        BatcherConfig {
            redraw_noise: false,
            shuffle: false,
            condition,
            ..self.train_batcher()
        }
    }

    pub fn eval_conditions(&self) -> Vec<NoiseCondition> {
        std::iter::once(NoiseCondition::Clean)
            .chain(self.data.eval_snrs_db.iter().map(|&snr_db| NoiseCondition::Fixed { snr_db }))
            .collect()
    }

    /// `output_root/name`, with the root from config, environment or `runs`.
    pub fn output_dir(&self) -> PathBuf {
        let root = self
            .run
            .output_root
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(&self.run.name)
    }

    pub fn stats_path(&self) -> PathBuf {
        self.data
            .stats_file
            .clone()
            .unwrap_or_else(|| self.data.corpus_dir.join("stats.bin"))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets `section.key` (dotted, any depth) to a TOML literal, falling back
/// to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let spec = spec.trim_start_matches("--");
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.into()))?;
    let path: Vec<&str> = key.split('.').collect();
    if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(spec.into()));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| ConfigError::Override(spec.into()))?;
    }
    cur.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}
