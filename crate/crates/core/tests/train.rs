mod common;

use std::path::Path;

use mcgate_core::config::RunConfig;
use mcgate_core::data::{Batcher, Dataset, NoiseCondition, SynthConfig};
use mcgate_core::labels::{make_thresholds, CorpusStats, ThresholdSet};
use mcgate_core::loss::LossWeights;
use mcgate_core::numerics::checkpoint::Checkpoint;
use mcgate_core::train::{
    evaluate, load_model, sweep, JointModel, SweepData, TrainData, TrainError, Trainer, BEST_CHECKPOINT,
    LAST_CHECKPOINT,
};
use mcgate_core::FbankExtractor;

struct Fixture {
    _dir: tempfile::TempDir,
    train: Dataset,
    dev: Dataset,
    test: Dataset,
    extractor: FbankExtractor,
    stats: CorpusStats,
    thresholds: ThresholdSet,
}

impl Fixture {
    fn new(cfg: &RunConfig, corpus: SynthConfig) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let (train, dev, test) = common::synth_splits(dir.path(), &corpus);
        let extractor = cfg.extractor().unwrap();
        let stats = train.corpus_stats(&extractor).unwrap();
        let thresholds = make_thresholds(&stats, &cfg.mcg.epsilons).unwrap();
        Self {
            _dir: dir,
            train,
            dev,
            test,
            extractor,
            stats,
            thresholds,
        }
    }

    fn tiny(cfg: &RunConfig) -> Self {
        Self::new(
            cfg,
            SynthConfig {
                train: 6,
                dev: 2,
                test: 3,
                ..SynthConfig::default()
            },
        )
    }

    fn data(&self) -> TrainData<'_> {
        TrainData {
            train: &self.train,
            dev: Some(&self.dev),
            extractor: &self.extractor,
            thresholds: &self.thresholds,
        }
    }

    fn sweep_data(&self) -> SweepData<'_> {
        SweepData {
            train: &self.train,
            dev: Some(&self.dev),
            test: &self.test,
            extractor: &self.extractor,
            stats: &self.stats,
        }
    }
}

fn read_log(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(String::from).collect()
}

fn field(line: &str, key: &str) -> f64 {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
        .unwrap_or_else(|| panic!("{key} missing from `{line}`"))
        .parse()
        .unwrap()
}

#[test]
fn resume_reproduces_the_next_step() {
    let cfg = common::tiny_run_config();
    let fx = Fixture::tiny(&cfg);
    let first_batch = |epoch| {
        Batcher::new(&fx.train, &fx.extractor, &fx.thresholds, cfg.train_batcher())
            .unwrap()
            .epoch(epoch)
            .next()
            .unwrap()
            .unwrap()
    };

    let mut straight = Trainer::<f64>::new(cfg.clone(), fx.data()).unwrap();
    straight.train_epoch().unwrap();
    let saved = straight.checkpoint();
    let expected = straight.step(&first_batch(1)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    saved.save(&path).unwrap();
    let mut resumed = Trainer::<f64>::resume(&Checkpoint::load(&path).unwrap(), fx.data()).unwrap();
    assert_eq!((resumed.state.epoch, resumed.state.step), (1, straight.state.step - 1));
    let got = resumed.step(&first_batch(1)).unwrap();
    for (a, b) in [
        (got.total, expected.total),
        (got.l_g, expected.l_g),
        (got.l_r, expected.l_r),
        (got.l_o, expected.l_o),
        (got.l_ctc, expected.l_ctc),
    ] {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }

    let rest_straight = straight.train_epoch().unwrap();
    let rest_resumed = resumed.train_epoch().unwrap();
    assert!((rest_straight.train.total - rest_resumed.train.total).abs() <= 1e-6);
    assert_eq!(rest_straight.learning_rate, rest_resumed.learning_rate);
}

#[test]
fn every_step_logs_the_full_breakdown_and_the_scheduler_sees_the_logged_value() {
    let mut cfg = common::tiny_run_config();
    cfg.optim.max_epochs = 3;
    let fx = Fixture::tiny(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("train.log");
    let mut trainer = Trainer::<f32>::new(cfg.clone(), fx.data())
        .unwrap()
        .with_log(std::fs::File::create(&log).unwrap());
    let outcome = trainer.run().unwrap();
    drop(trainer);

    let lines = read_log(&log);
    let steps: Vec<&String> = lines.iter().filter(|l| l.starts_with("step=")).collect();
    let epochs: Vec<&String> = lines.iter().filter(|l| l.starts_with("epoch=")).collect();
    assert_eq!(steps.len(), 3 * fx.train.len().div_ceil(cfg.data.batch_size));
    assert_eq!(epochs.len(), 3);
    for l in &steps {
        for key in ["l_g", "l_r", "l_o", "l_ctc", "total", "w_g", "w_r", "w_o", "w_ctc", "grad_norm", "lr"] {
            assert!(field(l, key).is_finite());
        }
    }
    for (l, report) in epochs.iter().zip(&outcome.epochs) {
        let val = report.val.expect("dev set present");
        assert_eq!(report.metric, val.total);
        assert_eq!(field(l, "metric"), field(l, "val_total"));
        assert!((field(l, "val_total") - val.total).abs() < 1e-5);
    }
}

#[test]
fn ctc_only_weights_log_every_term_but_train_on_ctc() {
    let mut cfg = common::tiny_run_config();
    cfg.loss = LossWeights::ctc_only();
    let fx = Fixture::tiny(&cfg);
    let mut trainer = Trainer::<f64>::new(cfg, fx.data()).unwrap();
    let b = trainer.train_epoch().unwrap().train;
    assert!(b.l_g > 0.0 && b.l_r > 0.0 && b.l_o > 0.0);
    assert!((b.total - b.l_ctc).abs() < 1e-12, "{b:?}");
}

#[test]
fn untrained_model_scores_near_one_hundred_percent() {
    let cfg = RunConfig::paper();
    let fx = Fixture::new(&cfg, SynthConfig::default());
    let model = JointModel::<f32>::new(&cfg).unwrap();
    let reports = evaluate(&model, &cfg, &fx.test, &fx.extractor, &fx.thresholds, &[NoiseCondition::Clean]).unwrap();
    let wer = reports[0].summary.wer_percent();
    assert!((80.0..=120.0).contains(&wer), "untrained WER {wer}");
}

#[test]
fn vocabulary_mismatch_is_rejected() {
    let mut cfg = common::tiny_run_config();
    cfg.asr.vocab_size = 3;
    let fx = Fixture::tiny(&cfg);
    let err = Trainer::<f32>::new(cfg.clone(), fx.data()).err().expect("mismatch");
    assert!(matches!(err, TrainError::VocabMismatch { vocab_size: 3, .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
    let model = JointModel::<f32>::new(&cfg).unwrap();
    let err = evaluate(&model, &cfg, &fx.test, &fx.extractor, &fx.thresholds, &[NoiseCondition::Clean]).unwrap_err();
    assert!(matches!(err, TrainError::VocabMismatch { .. }));
}

#[test]
fn divergence_halts_and_keeps_the_last_good_checkpoint() {
    let mut cfg = common::tiny_run_config();
    cfg.optim.grad_clip = None;
    let fx = Fixture::tiny(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let mut trainer = Trainer::<f32>::new(cfg, fx.data()).unwrap().with_checkpoints(dir.path());
    trainer.train_epoch().unwrap();
    let good = std::fs::read(dir.path().join(LAST_CHECKPOINT)).unwrap();
    trainer.state.adam.set_learning_rate(1e30).unwrap();
    let err = trainer.train_epoch().unwrap_err();
    assert!(matches!(err, TrainError::NonFinite { .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
    assert_eq!(std::fs::read(dir.path().join(LAST_CHECKPOINT)).unwrap(), good);
    let (_, model) = load_model::<f32>(&dir.path().join(LAST_CHECKPOINT)).unwrap();
    assert!(model.mcg.heads[0].weight.get().data().iter().all(|v| v.is_finite()));
}

#[test]
fn single_cell_sweep_equals_train_then_evaluate() {
    let mut cfg = common::tiny_run_config();
    cfg.optim.max_epochs = 2;
    let root = tempfile::tempdir().unwrap();
    cfg.run.output_root = Some(root.path().to_path_buf());
    cfg.sweep.grid = vec![cfg.mcg.epsilons.clone()];
    let fx = Fixture::tiny(&cfg);

    let cells = sweep(&cfg, fx.sweep_data()).unwrap();
    assert_eq!(cells.len(), 1);
    let swept = cells[0].result.clone().unwrap();

    let mut trainer = Trainer::<f32>::new(cfg.clone(), fx.data()).unwrap();
    trainer.run().unwrap();
    trainer.restore_best();
    let direct = evaluate(
        trainer.model(),
        &cfg,
        &fx.test,
        &fx.extractor,
        &fx.thresholds,
        &cfg.eval_conditions(),
    )
    .unwrap();
    assert_eq!(swept, direct);
    let cell_dir = cfg.output_dir().join("cell0_n3");
    assert!(cell_dir.join(BEST_CHECKPOINT).exists());
    assert!(cell_dir.join("train.log").exists());
}

#[test]
fn repeated_cells_are_identical_and_failures_stay_local() {
    let mut cfg = common::tiny_run_config();
    cfg.optim.max_epochs = 1;
    let root = tempfile::tempdir().unwrap();
    cfg.run.output_root = Some(root.path().to_path_buf());
    cfg.sweep.grid = vec![vec![-1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 1.0]];
    let fx = Fixture::tiny(&cfg);
    let cells = sweep(&cfg, fx.sweep_data()).unwrap();
    assert_eq!(cells.len(), 3);
    assert!(cells[1].result.is_err());
    assert_eq!(cells[0].result.as_ref().unwrap(), cells[2].result.as_ref().unwrap());

    cfg.sweep.grid.clear();
    assert!(sweep(&cfg, fx.sweep_data()).is_err());
}

#[test]
fn noisy_test_is_no_easier_than_clean() {
    let mut cfg = RunConfig::desk();
    cfg.optim.max_epochs = 30;
    let fx = Fixture::new(&cfg, SynthConfig::default());
    let data = TrainData { dev: None, ..fx.data() };
    let mut trainer = Trainer::<f32>::new(cfg.clone(), data).unwrap();
    trainer.run().unwrap();
    trainer.restore_best();
    let conditions = [NoiseCondition::Clean, NoiseCondition::Fixed { snr_db: 0.0 }];
    let r = evaluate(trainer.model(), &cfg, &fx.test, &fx.extractor, &fx.thresholds, &conditions).unwrap();
    let (clean, noisy) = (r[0].summary.wer_percent(), r[1].summary.wer_percent());
    assert!(noisy >= clean, "clean {clean} vs 0 dB {noisy}");
}
