use std::path::Path;
use std::process::{Command, Output};

fn mcgate(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcgate"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("MCGATE_OUTPUT_ROOT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY: &[&str] = &[
    "--asr.num_blocks=1",
    "--asr.d_model=16",
    "--asr.ffn_units=32",
    "--asr.heads=2",
    "--mcg.lstm_units=8",
    "--mcg.channels=[2,3,4,3,2]",
];

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().chain(TINY).copied().collect()
}

fn tiny_corpus(dir: &Path) {
    assert_ok(&mcgate(dir, &["synth", "--train", "3", "--dev", "2", "--test", "2"]));
    assert_ok(&mcgate(dir, &with_tiny(&["stats"])));
}

#[test]
fn synth_stats_train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny_corpus(dir);
    assert!(dir.join("corpus/train.tsv").exists());
    assert!(dir.join("corpus/stats.bin").exists());

    assert_ok(&mcgate(dir, &with_tiny(&["train", "--optim.max_epochs=2", "--run.name=r1"])));
    let run = dir.join("runs/r1");
    for f in ["best.ckpt", "last.ckpt", "train.log", "config.toml"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let log = std::fs::read_to_string(run.join("train.log")).unwrap();
    let steps: Vec<&str> = log.lines().filter(|l| l.starts_with("step=")).collect();
    assert!(!steps.is_empty());
    for line in &steps {
        for field in ["l_g=", "l_r=", "l_o=", "l_ctc=", "total=", "grad_norm=", "lr="] {
            assert!(line.contains(field), "{field} missing from `{line}`");
        }
    }
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch=")).count(), 2);

    let out = mcgate(dir, &["eval", "--run.name=r1"]);
    assert_ok(&out);
    let report = String::from_utf8_lossy(&out.stdout);
    assert!(report.contains("clean") && report.contains("WER%"), "{report}");
    assert!(run.join("eval_test.txt").exists());

    let out = mcgate(
        dir,
        &["train", "--resume", "runs/r1/last.ckpt", "--optim.max_epochs=3"],
    );
    assert_ok(&out);
    let log = std::fs::read_to_string(run.join("train.log")).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch=")).count(), 3);
}

#[test]
fn configuration_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cases: &[&[&str]] = &[
        &["train", "--optim.learning_rate=-1"],
        &["train", "--mcg.epsilons=[1.0, -1.0]"],
        &["train", "--optim.no_such_key=1"],
        &["stats", "--features.input_scale=0"],
        &["train"],
        &["frobnicate"],
    ];
    for args in cases {
        let out = mcgate(dir, args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn missing_statistics_is_a_configuration_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_ok(&mcgate(dir, &["synth", "--train", "2", "--dev", "0", "--test", "1"]));
    let out = mcgate(dir, &["train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mcgate stats"));
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny_corpus(dir);
    let out = Command::new(env!("CARGO_BIN_EXE_mcgate"))
        .current_dir(dir)
        .env("MCGATE_OUTPUT_ROOT", dir.join("elsewhere"))
        .args(with_tiny(&["train", "--optim.max_epochs=1", "--run.name=env"]))
        .output()
        .unwrap();
    assert_ok(&out);
    assert!(dir.join("elsewhere/env/last.ckpt").exists());
    assert!(!dir.join("runs").exists());
}

#[test]
fn diverging_training_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny_corpus(dir);
    let out = mcgate(
        dir,
        &with_tiny(&["train", "--optim.learning_rate=1e30", "--optim.grad_clip=0", "--run.name=boom"]),
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn config_file_layers_under_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny_corpus(dir);
    std::fs::write(
        dir.join("run.toml"),
        "[run]\nname = \"from-file\"\n[optim]\nmax_epochs = 5\n",
    )
    .unwrap();
    let out = mcgate(
        dir,
        &with_tiny(&["train", "--config", "run.toml", "--optim.max_epochs=1"]),
    );
    assert_ok(&out);
    let saved = std::fs::read_to_string(dir.join("runs/from-file/config.toml")).unwrap();
    assert!(saved.contains("max_epochs = 1"), "{saved}");
}
