//! `mcgate`: synthesize the toy corpus, freeze statistics, train, evaluate
//! and sweep gate offsets.
//!
//! Every configuration key can be overridden with `--section.key=value`
//! anywhere on the command line, e.g. `--optim.learning_rate=1e-3`. Run
//! directories live under `run.output_root`, else `$MCGATE_OUTPUT_ROOT`,
//! else `runs/`.

use std::fs::{self, File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use mcgate_core::data::{synth_toy_corpus, CorpusPaths};
use mcgate_core::labels::make_thresholds;
use mcgate_core::numerics::checkpoint::Checkpoint;
use mcgate_core::train::{
    config_from_checkpoint, evaluate, format_eval_report, format_sweep_report, load_model, sweep, SweepData,
    TrainData, BEST_CHECKPOINT,
};
use mcgate_core::{ConfigError, Dataset, RunConfig, StatsFile, SynthConfig, TrainError, Trainer};

#[derive(Debug, Parser)]
#[command(name = "mcgate", version, about = "Multiple-confidence-gate ASR front-end")]
#[command(after_help = "Configuration keys are overridden with --section.key=value, \
    e.g. --optim.max_epochs=50 --mcg.epsilons=[-1,1].")]
struct Cli {
    /// TOML configuration layered over the preset named in `run.preset`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic token corpus and its noise pools.
    Synth {
        /// Defaults to `data.corpus_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        train: usize,
        #[arg(long, default_value_t = 4)]
        dev: usize,
        #[arg(long, default_value_t = 8)]
        test: usize,
    },
    /// Freeze clean-feature statistics of the training split.
    Stats,
    /// Train the joint model; checkpoints and `train.log` go to the run directory.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a split, clean and at every `data.eval_snrs_db`.
    Eval {
        /// Defaults to the best checkpoint of the configured run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and evaluate one model per `sweep.grid` row.
    Sweep,
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Train(e) => e.exit_code() as u8,
            CliError::Usage(_) => 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Train(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| {
        CliError::Train(TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Pulls `--section.key=value` overrides out of the argument list.
fn split_overrides(args: impl IntoIterator<Item = String>) -> (Vec<String>, Vec<String>) {
    args.into_iter().partition(|a| {
        a.strip_prefix("--")
            .and_then(|rest| rest.split_once('='))
            .is_some_and(|(key, _)| key.contains('.'))
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (overrides, args) = split_overrides(std::env::args());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli, overrides: &[String]) -> Result<()> {
    match cli.command {
        Command::Eval { checkpoint, split } => return eval(cli.config.as_deref(), overrides, checkpoint, &split),
        Command::Train { resume: Some(path) } => return resume(&path, cli.config.as_deref(), overrides),
        _ => {}
    }
    let cfg = RunConfig::load(cli.config.as_deref(), overrides)?;
    match cli.command {
        Command::Synth {
            out,
            seed,
            train,
            dev,
            test,
        } => {
            let synth = SynthConfig {
                seed,
                vocab_size: cfg.asr.vocab_size,
                train,
                dev,
                test,
                sample_rate: cfg.features.sample_rate,
                ..SynthConfig::default()
            };
            let out = out.unwrap_or_else(|| cfg.data.corpus_dir.clone());
            let paths = synth_toy_corpus(&synth, &out).map_err(TrainError::from)?;
            println!("wrote corpus to {}", paths.root.display());
            Ok(())
        }
        Command::Stats => stats(&cfg),
        Command::Train { resume: None } => train(cfg),
        Command::Sweep => run_sweep(&cfg),
        Command::Eval { .. } | Command::Train { .. } => unreachable!("handled above"),
    }
}

fn corpus(cfg: &RunConfig) -> CorpusPaths {
    CorpusPaths {
        root: cfg.data.corpus_dir.clone(),
    }
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<Dataset> {
    let paths = corpus(cfg);
    let noise = paths.noise_manifest(split);
    let noise = noise.exists().then_some(noise);
    Ok(Dataset::load(&paths.manifest(split), noise.as_deref()).map_err(TrainError::from)?)
}

fn load_optional_split(cfg: &RunConfig, split: &str) -> Result<Option<Dataset>> {
    if corpus(cfg).manifest(split).exists() {
        load_split(cfg, split).map(Some)
    } else {
        Ok(None)
    }
}

fn stats(cfg: &RunConfig) -> Result<()> {
    let train = load_split(cfg, "train")?;
    let extractor = cfg.extractor()?;
    let stats = train.corpus_stats(&extractor).map_err(TrainError::from)?;
    let file = StatsFile {
        stats,
        epsilons: cfg.mcg.epsilons.clone(),
    };
    let path = cfg.stats_path();
    file.save(&path).map_err(TrainError::from)?;
    println!("wrote statistics of {} clips to {}", file.stats.clips, path.display());
    Ok(())
}

fn load_stats(cfg: &RunConfig) -> Result<StatsFile> {
    let path = cfg.stats_path();
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "statistics file {} not found; run `mcgate stats` first",
            path.display()
        )));
    }
    let file = StatsFile::load(&path).map_err(TrainError::from)?;
    if file.stats.n_bins() != cfg.mcg.n_bins {
        return Err(ConfigError::Invalid(format!(
            "statistics have {} bins but mcg.n_bins is {}",
            file.stats.n_bins(),
            cfg.mcg.n_bins
        ))
        .into());
    }
    Ok(file)
}

fn prepare_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir).map_err(io_error(&dir))?;
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(io_error(&cfg_path))?;
    Ok(dir)
}

fn open_log(dir: &Path, append: bool) -> Result<BufWriter<File>> {
    let path = dir.join("train.log");
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&path)
        .map_err(io_error(&path))?;
    Ok(BufWriter::new(file))
}

fn train(cfg: RunConfig) -> Result<()> {
    let train = load_split(&cfg, "train")?;
    let dev = load_optional_split(&cfg, "dev")?;
    let stats = load_stats(&cfg)?;
    let extractor = cfg.extractor()?;
    let thresholds = make_thresholds(&stats.stats, &cfg.mcg.epsilons).map_err(TrainError::from)?;
    let data = TrainData {
        train: &train,
        dev: dev.as_ref(),
        extractor: &extractor,
        thresholds: &thresholds,
    };
    let dir = prepare_run_dir(&cfg)?;
    let trainer = Trainer::<f32>::new(cfg, data)?;
    fit(trainer, &dir, false)
}

fn resume(path: &Path, config: Option<&Path>, overrides: &[String]) -> Result<()> {
    let ck = Checkpoint::load(path).map_err(TrainError::from)?;
    let cfg = reconfigure(config_from_checkpoint(&ck)?, config, overrides)?;
    let train = load_split(&cfg, "train")?;
    let dev = load_optional_split(&cfg, "dev")?;
    let stats = load_stats(&cfg)?;
    let extractor = cfg.extractor()?;
    let thresholds = make_thresholds(&stats.stats, &cfg.mcg.epsilons).map_err(TrainError::from)?;
    let data = TrainData {
        train: &train,
        dev: dev.as_ref(),
        extractor: &extractor,
        thresholds: &thresholds,
    };
    let dir = prepare_run_dir(&cfg)?;
    let mut trainer = Trainer::<f32>::resume(&ck, data)?;
    trainer.cfg = cfg;
    fit(trainer, &dir, true)
}

/// Applies the `data`, `run` and `optim` sections of a config file and any
/// overrides to a saved configuration. The model sections stay fixed.
fn reconfigure(saved: RunConfig, config: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table: toml::Table = saved.to_toml().parse().expect("serialized config parses");
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(io_error(path))?;
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for key in ["data", "run", "optim"] {
            if let Some(section) = file.get(key) {
                table.insert(key.into(), section.clone());
            }
        }
    }
    let cfg = RunConfig::from_table(table, overrides)?;
    let fixed = |c: &RunConfig| (c.mcg.clone(), c.asr.clone(), c.features.clone(), c.loss, c.run.seed);
    if fixed(&cfg) != fixed(&saved) {
        return Err(ConfigError::Invalid("model, feature, loss and seed settings are fixed by the checkpoint".into()).into());
    }
    Ok(cfg)
}

fn fit(trainer: Trainer<'_, f32>, dir: &Path, append: bool) -> Result<()> {
    let mut trainer = trainer.with_checkpoints(dir).with_log(open_log(dir, append)?);
    let outcome = trainer.run()?;
    let last = outcome.epochs.last();
    println!(
        "trained {} epochs{}; best validation metric {:.4}; final learning rate {:.3e}",
        outcome.epochs.len(),
        if outcome.stopped_early { " (stopped on plateau)" } else { "" },
        outcome.best_metric,
        last.map_or(trainer.cfg.optim.learning_rate, |r| r.learning_rate)
    );
    println!("checkpoints in {}", dir.display());
    Ok(())
}

fn eval(config: Option<&Path>, overrides: &[String], checkpoint: Option<PathBuf>, split: &str) -> Result<()> {
    let checkpoint = match checkpoint {
        Some(p) => p,
        None => RunConfig::load(config, overrides)?.output_dir().join(BEST_CHECKPOINT),
    };
    let (saved, model) = load_model::<f32>(&checkpoint)?;
    let cfg = reconfigure(saved, config, overrides)?;

    let ds = load_split(&cfg, split)?;
    let stats = load_stats(&cfg)?;
    let extractor = cfg.extractor()?;
    let thresholds = make_thresholds(&stats.stats, &cfg.mcg.epsilons).map_err(TrainError::from)?;
    let reports = evaluate(&model, &cfg, &ds, &extractor, &thresholds, &cfg.eval_conditions())?;
    let text = format_eval_report(&reports);
    print!("{text}");
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir).map_err(io_error(&dir))?;
    let out = dir.join(format!("eval_{split}.txt"));
    fs::write(&out, &text).map_err(io_error(&out))?;
    Ok(())
}

fn run_sweep(cfg: &RunConfig) -> Result<()> {
    let train = load_split(cfg, "train")?;
    let dev = load_optional_split(cfg, "dev")?;
    let test = load_split(cfg, "test")?;
    let stats = load_stats(cfg)?;
    let extractor = cfg.extractor()?;
    let data = SweepData {
        train: &train,
        dev: dev.as_ref(),
        test: &test,
        extractor: &extractor,
        stats: &stats.stats,
    };
    let dir = prepare_run_dir(cfg)?;
    let cells = sweep(cfg, data)?;
    let text = format_sweep_report(&cells);
    print!("{text}");
    let out = dir.join("sweep.txt");
    fs::write(&out, &text).map_err(io_error(&out))?;
    if cells.iter().all(|c| c.result.is_err()) {
        return Err(CliError::Usage("every sweep cell failed".into()));
    }
    Ok(())
}
