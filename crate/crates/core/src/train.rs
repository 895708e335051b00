//! Joint training loop, evaluation and epsilon sweeps.

use std::fmt::Write as _;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use thiserror::Error;

use crate::config::{ConfigError, PlateauMetric, RunConfig};
use crate::conformer::{frame_mask, ConformerAsr, EncoderOutput};
use crate::data::{Batch, BatchTensors, Batcher, DataError, Dataset, NoiseCondition};
use crate::dsp::FbankExtractor;
use crate::labels::{make_thresholds, CorpusStats, LabelError, ThresholdSet};
use crate::loss::{
    ctc_loss, encoder_consistency_loss, filtered_consistency_loss, gate_loss, total_loss, JointLossBreakdown, LossError,
    LossParts, LossWeights,
};
use crate::mcg::{McgModel, McgOutput};
use crate::metrics::{decode_batch, wer_align, WerSummary};
use crate::nn::{Ctx, Module};
use crate::numerics::checkpoint::{Checkpoint, CheckpointError};
use crate::numerics::optim::{AdamState, Moments, OptimError, PlateauSchedule};
use crate::numerics::param::{clip_grad_norm, grad_norm};
use crate::numerics::rng::Rng;
use crate::numerics::{no_grad, Element, Param, Tensor, TensorError};

const INIT_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const NOISY_BRANCH: u64 = 0;
const CLEAN_BRANCH: u64 = 1;
const PREFETCH_DEPTH: usize = 2;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Labels(#[from] LabelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("model: {0}")]
    Model(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: u64 },
    #[error("optimizer: {0}")]
    Optim(OptimError),
    #[error("manifest uses token {max_token} but the model vocabulary has {vocab_size} tokens")]
    VocabMismatch { max_token: usize, vocab_size: usize },
    #[error("no usable batches in {0}")]
    NoBatches(&'static str),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

impl From<LossError> for TrainError {
    fn from(e: LossError) -> Self {
        match e {
            LossError::Tensor(t) => TrainError::Tensor(t),
            other => TrainError::Loss(other),
        }
    }
}

impl TrainError {
    /// Process exit status: 3 for numeric failures, 2 for everything that
    /// stems from configuration or inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            TrainError::NonFinite { .. } => 3,
            TrainError::Optim(OptimError::NonFiniteGradient(_)) => 3,
            TrainError::Loss(LossError::NonFinite(_)) => 3,
            _ => 2,
        }
    }
}

/// Gate front-end followed by the recognizer.
pub struct JointModel<T: Element> {
    pub mcg: McgModel<T>,
    pub asr: ConformerAsr<T>,
}

pub struct JointOutput<T: Element> {
    pub mcg: McgOutput<T>,
    pub encoder: EncoderOutput<T>,
}

impl<T: Element> JointModel<T> {
    /// Fresh weights drawn from the run seed.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let mut rng = Rng::derive(cfg.run.seed, &[INIT_STREAM]);
        let mcg = McgModel::new(cfg.mcg.clone(), &mut rng).map_err(|e| TrainError::Model(e.to_string()))?;
        let asr = ConformerAsr::new(cfg.asr.clone(), &mut rng).map_err(|e| TrainError::Model(e.to_string()))?;
        Ok(Self { mcg, asr })
    }

    /// `x` is `(B, T, Q)` log filterbank features.
    pub fn forward(&self, x: &Tensor<T>, lengths: &[usize], ctx: &mut Ctx) -> Result<JointOutput<T>> {
        let mcg = self.mcg.forward(x, ctx)?;
        let encoder = self.asr.forward(&mcg.x_in, lengths, ctx)?;
        Ok(JointOutput { mcg, encoder })
    }

    pub fn vocab_size(&self) -> usize {
        self.asr.config.vocab_size
    }

    pub fn check_vocab(&self, ds: &Dataset) -> Result<()> {
        let max_token = ds.max_token();
        if max_token > self.vocab_size() {
            return Err(TrainError::VocabMismatch {
                max_token,
                vocab_size: self.vocab_size(),
            });
        }
        Ok(())
    }

    fn snapshot(&self) -> Vec<Vec<T>> {
        self.params().iter().map(|p| p.get().to_vec()).collect()
    }

    fn restore(&self, snapshot: &[Vec<T>]) {
        for (p, v) in self.params().iter().zip(snapshot) {
            p.set_data(v.clone());
        }
    }
}

impl<T: Element> Module<T> for JointModel<T> {
    fn collect(&self, out: &mut Vec<Param<T>>) {
        self.mcg.collect(out);
        self.asr.collect(out);
    }
}

/// Clean-branch targets for the consistency losses. Never part of a graph.
pub struct CleanRefs<T: Element> {
    pub filtered: Vec<Tensor<T>>,
    pub encoded: Tensor<T>,
}

impl<T: Element> CleanRefs<T> {
    /// Same values in fresh constant tensors.
    pub fn to_constants(&self) -> Result<Self> {
        let copy = |t: &Tensor<T>| Tensor::from_vec(t.to_vec(), t.shape());
        Ok(Self {
            filtered: self.filtered.iter().map(copy).collect::<std::result::Result<_, _>>()?,
            encoded: copy(&self.encoded)?,
        })
    }
}

/// Runs the clean features through both networks without recording a
/// graph. With an RNG the networks are in training mode (batch statistics,
/// dropout) but leave their running statistics untouched.
pub fn clean_refs<T: Element>(
    model: &JointModel<T>,
    clean: &Tensor<T>,
    lengths: &[usize],
    rng: Option<&mut Rng>,
) -> Result<CleanRefs<T>> {
    no_grad(|| {
        let mut ctx = match rng {
            Some(r) => Ctx::train_frozen_stats(r),
            None => Ctx::eval(),
        };
        let out = model.forward(clean, lengths, &mut ctx)?;
        Ok(CleanRefs {
            filtered: out.mcg.filtered,
            encoded: out.encoder.encoded,
        })
    })
}

/// Assembles the four loss terms for a noisy forward pass.
pub fn joint_loss<T: Element>(
    out: &JointOutput<T>,
    batch: &BatchTensors<T>,
    tokens: &[Vec<usize>],
    refs: &CleanRefs<T>,
    weights: LossWeights,
) -> std::result::Result<(Tensor<T>, JointLossBreakdown), LossError> {
    let mask = Some(&batch.mask);
    let enc = &out.encoder;
    let enc_mask = frame_mask::<T>(&enc.lengths, enc.encoded.dim(1));
    let parts = LossParts {
        gate: gate_loss(&out.mcg.gates, &batch.labels, mask)?,
        filtered: filtered_consistency_loss(&out.mcg.filtered, &refs.filtered, mask)?,
        encoder: encoder_consistency_loss(&enc.encoded, &refs.encoded, Some(&enc_mask))?,
        ctc: ctc_loss(&enc.logits, tokens, &enc.lengths)?,
    };
    total_loss(&parts, weights)
}

/// Optimizer, schedule and counters alongside the model.
pub struct TrainState<T: Element> {
    pub model: JointModel<T>,
    pub adam: AdamState<T>,
    pub schedule: PlateauSchedule,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
}

impl<T: Element> TrainState<T> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            model: JointModel::new(cfg)?,
            adam: AdamState::new(cfg.adam()).map_err(TrainError::Optim)?,
            schedule: cfg.schedule(),
            epoch: 0,
            step: 0,
        })
    }

    pub fn to_checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.put_params(&self.model.params());
        for (name, m) in &self.adam.moments {
            ck.put_values(format!("adam/m/{name}"), &[m.m.len()], &m.m);
            ck.put_values(format!("adam/v/{name}"), &[m.v.len()], &m.v);
        }
        let s = &self.schedule;
        ck.put_u64s("train/counters", &[self.epoch, self.step, self.adam.step]);
        ck.put_u64s(
            "train/schedule_counters",
            &[s.epochs_since_improvement as u64, s.epochs_since_decay as u64],
        );
        ck.put_f64s("train/schedule", &[s.learning_rate, s.best_loss]);
        ck.put_bytes("train/config", cfg.to_toml().as_bytes());
        ck
    }

    /// Rebuilds model, optimizer and schedule; returns the stored config too.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(RunConfig, Self)> {
        let cfg = config_from_checkpoint(ck)?;
        let mut state = Self::new(&cfg)?;
        ck.load_params(&state.model.params())?;
        for p in state.model.trainable_params() {
            let (m_name, v_name) = (format!("adam/m/{}", p.name()), format!("adam/v/{}", p.name()));
            if !ck.contains(&m_name) {
                continue;
            }
            let moments = Moments {
                m: ck.values(&m_name, &[p.numel()])?,
                v: ck.values(&v_name, &[p.numel()])?,
            };
            state.adam.moments.insert(p.name().to_string(), moments);
        }
        let counters = ck.u64s("train/counters")?;
        let sched_counters = ck.u64s("train/schedule_counters")?;
        let sched = ck.f64s("train/schedule")?;
        if counters.len() != 3 || sched_counters.len() != 2 || sched.len() != 2 {
            return Err(CheckpointError::Corrupt("training counters".into()).into());
        }
        state.epoch = counters[0];
        state.step = counters[1];
        state.adam.step = counters[2];
        state.schedule.learning_rate = sched[0];
        state.schedule.best_loss = sched[1];
        state.schedule.epochs_since_improvement = sched_counters[0] as u32;
        state.schedule.epochs_since_decay = sched_counters[1] as u32;
        state.adam.set_learning_rate(sched[0]).map_err(TrainError::Optim)?;
        Ok((cfg, state))
    }
}

pub fn config_from_checkpoint(ck: &Checkpoint) -> Result<RunConfig> {
    let text = std::str::from_utf8(ck.bytes("train/config")?)
        .map_err(|_| CheckpointError::Corrupt("config is not UTF-8".into()))?;
    let table = text
        .parse::<toml::Table>()
        .map_err(|e| ConfigError::Parse(e.to_string()))?;
    Ok(RunConfig::from_table(table, &[])?)
}

/// Model and config stored in a checkpoint file.
pub fn load_model<T: Element>(path: &Path) -> Result<(RunConfig, JointModel<T>)> {
    let ck = Checkpoint::load(path)?;
    let cfg = config_from_checkpoint(&ck)?;
    let model = JointModel::new(&cfg)?;
    ck.load_params(&model.params())?;
    Ok((cfg, model))
}

/// Everything the trainer reads but does not own.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a Dataset,
    /// Falls back to the training loss for the schedule when absent.
    pub dev: Option<&'a Dataset>,
    pub extractor: &'a FbankExtractor,
    pub thresholds: &'a ThresholdSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// One-based.
    pub epoch: u64,
    pub steps: usize,
    /// Utterance-weighted mean over the epoch's steps.
    pub train: JointLossBreakdown,
    pub val: Option<JointLossBreakdown>,
    /// The value handed to the schedule.
    pub metric: f64,
    pub learning_rate: f64,
    pub improved: bool,
    pub decayed: bool,
    pub stop: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochReport>,
    pub best_metric: f64,
    pub stopped_early: bool,
}

#[derive(Default)]
struct LossMeter {
    sums: [f64; 5],
    weight: f64,
}

impl LossMeter {
    fn add(&mut self, b: &JointLossBreakdown, n: usize) {
        let w = n as f64;
        for (s, v) in self.sums.iter_mut().zip([b.l_g, b.l_r, b.l_o, b.l_ctc, b.total]) {
            *s += w * v;
        }
        self.weight += w;
    }

    fn mean(&self, weights: LossWeights) -> Option<JointLossBreakdown> {
        (self.weight > 0.0).then(|| {
            let [l_g, l_r, l_o, l_ctc, total] = self.sums.map(|s| s / self.weight);
            JointLossBreakdown {
                l_g,
                l_r,
                l_o,
                l_ctc,
                total,
                weights,
            }
        })
    }
}

fn breakdown_fields(prefix: &str, b: &JointLossBreakdown) -> String {
    format!(
        "{prefix}l_g={:.6} {prefix}l_r={:.6} {prefix}l_o={:.6} {prefix}l_ctc={:.6} {prefix}total={:.6}",
        b.l_g, b.l_r, b.l_o, b.l_ctc, b.total
    )
}

/// Single-process trainer. Batches are prepared on a helper thread one or
/// two steps ahead; their content depends only on seed and epoch.
pub struct Trainer<'a, T: Element> {
    pub cfg: RunConfig,
    pub state: TrainState<T>,
    data: TrainData<'a>,
    log: Option<Box<dyn Write + 'a>>,
    checkpoint_dir: Option<PathBuf>,
    best: Option<Vec<Vec<T>>>,
}

impl<'a, T: Element> Trainer<'a, T> {
    pub fn new(cfg: RunConfig, data: TrainData<'a>) -> Result<Self> {
        let state = TrainState::new(&cfg)?;
        Self::with_state(cfg, state, data)
    }

    /// Continues from a checkpoint written by [`Trainer::save`].
    pub fn resume(ck: &Checkpoint, data: TrainData<'a>) -> Result<Self> {
        let (cfg, state) = TrainState::from_checkpoint(ck)?;
        Self::with_state(cfg, state, data)
    }

    fn with_state(cfg: RunConfig, state: TrainState<T>, data: TrainData<'a>) -> Result<Self> {
        cfg.validate()?;
        if data.thresholds.epsilons != cfg.mcg.epsilons {
            return Err(ConfigError::Invalid(format!(
                "thresholds built for epsilons {:?}, model expects {:?}",
                data.thresholds.epsilons, cfg.mcg.epsilons
            ))
            .into());
        }
        if data.extractor.filterbank.n_filters != cfg.mcg.n_bins {
            return Err(ConfigError::Invalid("feature extractor and model disagree on the number of bins".into()).into());
        }
        state.model.check_vocab(data.train)?;
        if let Some(dev) = data.dev {
            state.model.check_vocab(dev)?;
        }
        Ok(Self {
            cfg,
            state,
            data,
            log: None,
            checkpoint_dir: None,
            best: None,
        })
    }

    /// Receives one line per step and one per epoch.
    pub fn with_log(mut self, out: impl Write + 'a) -> Self {
        self.log = Some(Box::new(out));
        self
    }

    /// Writes `last.ckpt` after every epoch and `best.ckpt` on improvement.
    pub fn with_checkpoints(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn model(&self) -> &JointModel<T> {
        &self.state.model
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.state.to_checkpoint(&self.cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.checkpoint().save(path)?)
    }

    fn emit(&mut self, line: &str) -> Result<()> {
        log::debug!("{line}");
        if let Some(out) = self.log.as_mut() {
            writeln!(out, "{line}").map_err(|source| TrainError::Io {
                path: "training log".into(),
                source,
            })?;
        }
        Ok(())
    }

    fn numeric(&self, what: impl Into<String>) -> TrainError {
        TrainError::NonFinite {
            what: what.into(),
            step: self.state.step,
        }
    }

    /// Forward both branches, backpropagate, clip and apply one Adam update.
    pub fn step(&mut self, batch: &Batch) -> Result<JointLossBreakdown> {
        let (seed, step) = (self.cfg.run.seed, self.state.step);
        let t = batch.tensors::<T>();
        let mut clean_rng = Rng::derive(seed, &[DROPOUT_STREAM, step, CLEAN_BRANCH]);
        let refs = clean_refs(&self.state.model, &t.clean, &batch.lengths, Some(&mut clean_rng))?;

        let mut rng = Rng::derive(seed, &[DROPOUT_STREAM, step, NOISY_BRANCH]);
        let mut ctx = Ctx::train(&mut rng);
        let out = self.state.model.forward(&t.noisy, &batch.lengths, &mut ctx)?;
        let (loss, parts) = match joint_loss(&out, &t, &batch.tokens, &refs, self.cfg.loss) {
            Err(LossError::NonFinite(what)) => return Err(self.numeric(format!("{what} loss"))),
            other => other?,
        };
        loss.backward()?;

        let params = self.state.model.trainable_params();
        let norm = match self.cfg.optim.grad_clip {
            Some(c) if c > 0.0 => clip_grad_norm(&params, c),
            _ => grad_norm(&params),
        };
        if !norm.is_finite() {
            return Err(self.numeric("gradient norm"));
        }
        match self.state.adam.step(&params) {
            Err(OptimError::NonFiniteGradient(p)) => return Err(self.numeric(format!("gradient of {p}"))),
            other => other.map_err(TrainError::Optim)?,
        }
        params.iter().for_each(Param::zero_grad);
        self.state.step += 1;

        let w = parts.weights;
        let line = format!(
            "step={} epoch={} {} w_g={} w_r={} w_o={} w_ctc={} grad_norm={:.6} lr={:.6e}",
            self.state.step,
            self.state.epoch + 1,
            breakdown_fields("", &parts),
            w.gate,
            w.filtered,
            w.encoder,
            w.ctc,
            norm,
            self.state.adam.learning_rate()
        );
        self.emit(&line)?;
        Ok(parts)
    }

    /// Eval-mode losses over the fixed dev mixtures.
    pub fn validate(&self) -> Result<Option<JointLossBreakdown>> {
        let Some(dev) = self.data.dev else {
            return Ok(None);
        };
        let d = &self.cfg.data;
        let condition = NoiseCondition::Uniform {
            min_db: d.snr_min_db,
            max_db: d.snr_max_db,
        };
        let batcher = Batcher::new(dev, self.data.extractor, self.data.thresholds, self.cfg.eval_batcher(condition))?;
        let mut meter = LossMeter::default();
        for batch in batcher.epoch(0) {
            let batch = batch?;
            let t = batch.tensors::<T>();
            let parts = no_grad(|| -> Result<JointLossBreakdown> {
                let refs = clean_refs(&self.state.model, &t.clean, &batch.lengths, None)?;
                let out = self.state.model.forward(&t.noisy, &batch.lengths, &mut Ctx::eval())?;
                match joint_loss(&out, &t, &batch.tokens, &refs, self.cfg.loss) {
                    Err(LossError::NonFinite(what)) => Err(self.numeric(format!("validation {what} loss"))),
                    other => Ok(other?.1),
                }
            })?;
            meter.add(&parts, batch.len());
        }
        match meter.mean(self.cfg.loss) {
            Some(m) => Ok(Some(m)),
            None => Err(TrainError::NoBatches("the dev set")),
        }
    }

    /// One pass over the training manifest, then validation, scheduling
    /// and checkpointing.
    pub fn train_epoch(&mut self) -> Result<EpochReport> {
        let started = Instant::now();
        let epoch = self.state.epoch;
        let data = self.data;
        let batch_cfg = self.cfg.train_batcher();
        let batcher = Batcher::new(data.train, data.extractor, data.thresholds, batch_cfg)?;
        let mut meter = LossMeter::default();
        let mut steps = 0;
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel(PREFETCH_DEPTH);
            let batcher = &batcher;
            scope.spawn(move || {
                for batch in batcher.epoch(epoch) {
                    if tx.send(batch).is_err() {
                        break;
                    }
                }
            });
            for batch in rx {
                let batch = batch?;
                let parts = self.step(&batch)?;
                meter.add(&parts, batch.len());
                steps += 1;
            }
            Ok(())
        })?;
        let train = meter.mean(self.cfg.loss).ok_or(TrainError::NoBatches("the training set"))?;

        let val = self.validate()?;
        let reference = val.unwrap_or(train);
        let metric = match self.cfg.optim.plateau_metric {
            PlateauMetric::Total => reference.total,
            PlateauMetric::Ctc => reference.l_ctc,
        };
        let decision = self.state.schedule.update(metric);
        self.state.adam.set_learning_rate(decision.learning_rate).map_err(TrainError::Optim)?;
        self.state.epoch += 1;

        if decision.improved {
            self.best = Some(self.state.model.snapshot());
        }
        if let Some(dir) = self.checkpoint_dir.clone() {
            std::fs::create_dir_all(&dir).map_err(|source| TrainError::Io {
                path: dir.display().to_string(),
                source,
            })?;
            let ck = self.checkpoint();
            if decision.improved {
                ck.save(&dir.join(BEST_CHECKPOINT))?;
            }
            ck.save(&dir.join(LAST_CHECKPOINT))?;
        }

        let report = EpochReport {
            epoch: self.state.epoch,
            steps,
            train,
            val,
            metric,
            learning_rate: decision.learning_rate,
            improved: decision.improved,
            decayed: decision.decayed,
            stop: decision.stop,
            seconds: started.elapsed().as_secs_f64(),
        };
        let mut line = format!("epoch={} steps={} {}", report.epoch, steps, breakdown_fields("train_", &train));
        if let Some(v) = &val {
            let _ = write!(line, " {}", breakdown_fields("val_", v));
        }
        let _ = write!(
            line,
            " metric={:.6} lr={:.6e} improved={} decayed={} stop={} seconds={:.2}",
            metric, report.learning_rate, report.improved, report.decayed, report.stop, report.seconds
        );
        self.emit(&line)?;
        log::info!("{line}");
        Ok(report)
    }

    /// Trains until `max_epochs`, the schedule's stop signal, or the
    /// callback breaks.
    pub fn run_with(&mut self, mut on_epoch: impl FnMut(&EpochReport, &Self) -> ControlFlow<()>) -> Result<TrainOutcome> {
        let mut epochs = Vec::new();
        let mut stopped_early = false;
        while self.state.epoch < self.cfg.optim.max_epochs {
            let report = self.train_epoch()?;
            let flow = on_epoch(&report, self);
            let stop = report.stop || flow.is_break();
            epochs.push(report);
            if stop {
                stopped_early = true;
                break;
            }
        }
        Ok(TrainOutcome {
            epochs,
            best_metric: self.state.schedule.best_loss,
            stopped_early,
        })
    }

    pub fn run(&mut self) -> Result<TrainOutcome> {
        self.run_with(|_, _| ControlFlow::Continue(()))
    }

    /// Loads the weights of the best epoch seen so far into the model.
    pub fn restore_best(&self) {
        if let Some(best) = &self.best {
            self.state.model.restore(best);
        }
    }
}

/// Results for one noise condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub condition: String,
    pub summary: WerSummary,
    pub hypotheses: Vec<(String, Vec<usize>)>,
}

/// Greedy-decodes every utterance under each condition and scores it.
pub fn evaluate<T: Element>(
    model: &JointModel<T>,
    cfg: &RunConfig,
    ds: &Dataset,
    extractor: &FbankExtractor,
    thresholds: &ThresholdSet,
    conditions: &[NoiseCondition],
) -> Result<Vec<ConditionReport>> {
    model.check_vocab(ds)?;
    conditions
        .iter()
        .map(|&condition| {
            let batcher = Batcher::new(ds, extractor, thresholds, cfg.eval_batcher(condition))?;
            let mut summary = WerSummary::default();
            let mut hypotheses = Vec::new();
            for batch in batcher.epoch(0) {
                let batch = batch?;
                let t = batch.tensors::<T>();
                let out = no_grad(|| model.forward(&t.noisy, &batch.lengths, &mut Ctx::eval()))?;
                let hyps = decode_batch(&out.encoder.logits, &out.encoder.lengths);
                for ((id, reference), hyp) in batch.ids.iter().zip(&batch.tokens).zip(hyps) {
                    summary.push(wer_align(reference, &hyp));
                    hypotheses.push((id.clone(), hyp));
                }
            }
            if summary.utterances.is_empty() {
                return Err(TrainError::NoBatches("the evaluation set"));
            }
            Ok(ConditionReport {
                condition: condition.label(),
                summary,
                hypotheses,
            })
        })
        .collect()
}

/// S/D/I/WER table, corpus-level and mean per utterance.
pub fn format_eval_report(reports: &[ConditionReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>6} {:>8} {:>8} {:>8} {:>8} {:>10}",
        "condition", "utts", "S%", "D%", "I%", "WER%", "utt-WER%"
    );
    for r in reports {
        let [s, d, i] = r.summary.sdi_percent();
        let utt = r.summary.per_utterance_means()[3];
        let _ = writeln!(
            out,
            "{:<12} {:>6} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>10.2}",
            r.condition,
            r.summary.utterances.len(),
            s,
            d,
            i,
            r.summary.wer_percent(),
            utt
        );
    }
    out
}

/// Corpora shared by every sweep cell.
#[derive(Clone, Copy)]
pub struct SweepData<'a> {
    pub train: &'a Dataset,
    pub dev: Option<&'a Dataset>,
    pub test: &'a Dataset,
    pub extractor: &'a FbankExtractor,
    pub stats: &'a CorpusStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub epsilons: Vec<f64>,
    pub epochs: u64,
    /// Error message when the cell failed.
    pub result: std::result::Result<Vec<ConditionReport>, String>,
}

impl SweepCell {
    pub fn n(&self) -> usize {
        self.epsilons.len()
    }
}

fn format_eps(eps: &[f64]) -> String {
    let parts: Vec<String> = eps.iter().map(|e| format!("{e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn run_cell(cfg: &RunConfig, data: SweepData<'_>, conditions: &[NoiseCondition]) -> Result<(u64, Vec<ConditionReport>)> {
    let thresholds = make_thresholds(data.stats, &cfg.mcg.epsilons)?;
    let train_data = TrainData {
        train: data.train,
        dev: data.dev,
        extractor: data.extractor,
        thresholds: &thresholds,
    };
    let mut trainer = Trainer::<f32>::new(cfg.clone(), train_data)?.with_checkpoints(cfg.output_dir());
    let log_path = cfg.output_dir().join("train.log");
    std::fs::create_dir_all(cfg.output_dir()).map_err(|source| TrainError::Io {
        path: cfg.output_dir().display().to_string(),
        source,
    })?;
    let file = std::fs::File::create(&log_path).map_err(|source| TrainError::Io {
        path: log_path.display().to_string(),
        source,
    })?;
    trainer = trainer.with_log(std::io::BufWriter::new(file));
    let outcome = trainer.run()?;
    trainer.restore_best();
    let reports = evaluate(trainer.model(), cfg, data.test, data.extractor, &thresholds, conditions)?;
    Ok((outcome.epochs.len() as u64, reports))
}

/// Trains and evaluates one model per grid row with the same seed and
/// corpus. A failing cell is recorded and the sweep moves on.
pub fn sweep(cfg: &RunConfig, data: SweepData<'_>) -> Result<Vec<SweepCell>> {
    if cfg.sweep.grid.is_empty() {
        return Err(ConfigError::Invalid("sweep grid is empty".into()).into());
    }
    let conditions = cfg.eval_conditions();
    Ok(cfg
        .sweep
        .grid
        .iter()
        .enumerate()
        .map(|(i, eps)| {
            let mut cell_cfg = cfg.clone();
            cell_cfg.mcg.epsilons = eps.clone();
            cell_cfg.sweep.grid = vec![eps.clone()];
            cell_cfg.run.name = format!("{}/cell{}_n{}", cfg.run.name, i, eps.len());
            let outcome = cell_cfg
                .validate()
                .map_err(TrainError::from)
                .and_then(|_| run_cell(&cell_cfg, data, &conditions));
            match outcome {
                Ok((epochs, reports)) => SweepCell {
                    epsilons: eps.clone(),
                    epochs,
                    result: Ok(reports),
                },
                Err(e) => {
                    log::warn!("sweep cell {} {} failed: {e}", i, format_eps(eps));
                    SweepCell {
                        epsilons: eps.clone(),
                        epochs: 0,
                        result: Err(e.to_string()),
                    }
                }
            }
        })
        .collect())
}

/// One row per cell: n, epsilons, WER per condition.
pub fn format_sweep_report(cells: &[SweepCell]) -> String {
    let conditions: Vec<String> = cells
        .iter()
        .find_map(|c| c.result.as_ref().ok())
        .map(|r| r.iter().map(|c| c.condition.clone()).collect())
        .unwrap_or_default();
    let mut out = String::new();
    let _ = write!(out, "{:<3} {:<22}", "n", "epsilon");
    for c in &conditions {
        let _ = write!(out, " {:>10}", c);
    }
    out.push('\n');
    for cell in cells {
        let _ = write!(out, "{:<3} {:<22}", cell.n(), format_eps(&cell.epsilons));
        match &cell.result {
            Ok(reports) => {
                for r in reports {
                    let _ = write!(out, " {:>10.2}", r.summary.wer_percent());
                }
            }
            Err(e) => {
                let _ = write!(out, " failed: {e}");
            }
        }
        out.push('\n');
    }
    out
}
