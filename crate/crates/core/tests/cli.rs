use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use timekt::cli::{
    command_evaluate, command_prepare, command_simulate, command_train, main_with_args, Cli, Command, CHECKPOINT_FILE,
    METRICS_FILE, PREDICTIONS_FILE, RUN_LOG,
};
use timekt::training::load_checkpoint;
use timekt::Error;

const TINY: &[&str] = &[
    "--set",
    "d_model=16",
    "--set",
    "heads=2",
    "--set",
    "encoder_layers=1",
    "--set",
    "decoder_layers=1",
    "--set",
    "d_ff=32",
    "--set",
    "embed_dim=8",
    "--set",
    "content_id_dim=8",
    "--set",
    "batch_size=4",
    "--set",
    "warmup_steps=5",
    "--set",
    "eval_seq_len=32",
    "--set",
    "seq_len=32",
];

fn parse(args: &[&str]) -> Command {
    let mut full = vec!["timekt"];
    full.extend_from_slice(args);
    Cli::try_parse_from(full).unwrap().command
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Three users with twelve rows each, one lecture per user. When
/// `single_class` is set every answer is correct.
fn write_raw(dir: &Path, single_class: bool) -> PathBuf {
    let raw = dir.join("raw");
    fs::create_dir_all(&raw).unwrap();
    fs::write(
        raw.join("questions.csv"),
        "question_id,bundle_id,correct_answer,part,tags\n0,0,0,1,1 2\n1,1,1,2,3\n2,2,2,5,\n",
    )
    .unwrap();
    fs::write(
        raw.join("lectures.csv"),
        "lecture_id,tag,part,type_of\n100,2,1,concept\n",
    )
    .unwrap();
    let mut csv = String::from(
        "row_id,timestamp,user_id,content_id,content_type_id,task_container_id,user_answer,\
         answered_correctly,prior_question_elapsed_time,prior_question_had_explanation\n",
    );
    let mut row = 0;
    for user in [7i64, 8, 9] {
        for k in 0..12i64 {
            let ts = k * 1000 + user;
            if k == 5 {
                csv.push_str(&format!("{row},{ts},{user},100,1,{k},-1,-1,,\n"));
            } else {
                let c = (k + user) % 3;
                let ok = if single_class { 1 } else { ((k * user) % 3 != 0) as i64 };
                let prior = if k == 0 {
                    String::from(",")
                } else {
                    format!("{},true", 500 * k)
                };
                csv.push_str(&format!("{row},{ts},{user},{c},0,{k},{},{ok},{prior}\n", (c + ok) % 4));
            }
            row += 1;
        }
    }
    fs::write(raw.join("train.csv"), csv).unwrap();
    raw
}

/// Synthetic raw data large enough for both classes in validation.
fn synth_raw(dir: &Path) -> PathBuf {
    let raw = dir.join("synth");
    assert_eq!(
        main_with_args([
            "timekt",
            "synth",
            "--users",
            "40",
            "--interactions",
            "40",
            "--seed",
            "2",
            "--out",
            s(&raw)
        ]),
        0
    );
    raw
}

fn prepare_dir(raw: &Path, out: &Path, holdout: &str) {
    let Command::Prepare(a) = parse(&[
        "prepare",
        "--raw",
        s(raw),
        "--out",
        s(out),
        "--seed",
        "1",
        "--set",
        holdout,
    ]) else {
        unreachable!()
    };
    command_prepare(&a).unwrap();
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Option<timekt::training::MetricsReport> {
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--seed", "5"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    let Command::Train(a) = parse(&args) else {
        unreachable!()
    };
    command_train(&a).unwrap()
}

#[test]
fn prepare_fixture_and_rerun_digests() {
    let dir = tempfile::tempdir().unwrap();
    let raw = write_raw(dir.path(), false);
    let Command::Prepare(a) = parse(&[
        "prepare",
        "--raw",
        s(&raw),
        "--out",
        s(&dir.path().join("p1")),
        "--seed",
        "1",
    ]) else {
        unreachable!()
    };
    let first = command_prepare(&a).unwrap();
    assert_eq!(first.manifest.users, 3);
    assert_eq!(first.manifest.rows, 36);
    assert_eq!(first.manifest.questions, 3);
    assert_eq!(first.manifest.lectures, 1);
    assert_eq!(first.manifest.train_rows + first.manifest.valid_rows, 36);
    let second = command_prepare(&a).unwrap();
    assert_eq!(first.manifest.shards, second.manifest.shards);
    assert_eq!(first.manifest.inputs, second.manifest.inputs);
    assert!(dir.path().join("p1").join(RUN_LOG).exists());
}

#[test]
fn missing_lectures_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let raw = write_raw(dir.path(), false);
    fs::remove_file(raw.join("lectures.csv")).unwrap();
    let Command::Prepare(a) = parse(&["prepare", "--raw", s(&raw), "--out", s(&dir.path().join("p"))]) else {
        unreachable!()
    };
    let err = command_prepare(&a).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("lectures.csv"), "{err}");
    let code = main_with_args(["timekt", "prepare", "--raw", s(&raw), "--out", s(&dir.path().join("p"))]);
    assert_eq!(code, err.exit_code());
    assert_ne!(code, 0);
}

#[test]
fn short_training_run_leaves_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let raw = write_raw(dir.path(), false);
    let prep = dir.path().join("prep");
    prepare_dir(&raw, &prep, "holdout_fraction=0.2");
    let out = dir.path().join("run");
    train(&prep, &out, &["--max-steps", "10"]);
    let ckpt = load_checkpoint(&out.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ckpt.trainer.unwrap().step, 10);
    let metrics = fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    assert!(metrics.starts_with("step\t"), "{metrics}");
    let log = fs::read_to_string(out.join(RUN_LOG)).unwrap();
    assert!(log.contains("time_weighted_toggle=on"));
    assert!(log.contains("input.train="));
}

#[test]
fn time_weighting_off_freezes_decays() {
    let dir = tempfile::tempdir().unwrap();
    let raw = write_raw(dir.path(), false);
    let prep = dir.path().join("prep");
    prepare_dir(&raw, &prep, "holdout_fraction=0.2");
    let out = dir.path().join("off");
    train(&prep, &out, &["--max-steps", "10", "--time-weighted", "off"]);
    assert!(fs::read_to_string(out.join(RUN_LOG))
        .unwrap()
        .contains("time_weighted_toggle=off"));
    let model = load_checkpoint(&out.join(CHECKPOINT_FILE)).unwrap().model;
    let mut blocks = 0;
    for b in model.attention_blocks() {
        assert!(model.store.value(b.decay).iter().all(|&w| w == 0.0));
        blocks += 1;
    }
    assert!(blocks > 0);
}

#[test]
fn evaluate_reproduces_the_logged_auc() {
    let dir = tempfile::tempdir().unwrap();
    let raw = synth_raw(dir.path());
    let prep = dir.path().join("prep");
    prepare_dir(&raw, &prep, "holdout_fraction=0.2");
    let out = dir.path().join("run");
    let logged = train(&prep, &out, &["--max-steps", "20", "--set", "eval_every=10"]).unwrap();
    let ckpt = out.join(CHECKPOINT_FILE);

    let Command::Evaluate(a) = parse(&[
        "evaluate",
        "--data",
        s(&prep),
        "--checkpoint",
        s(&ckpt),
        "--seq-len",
        "32",
    ]) else {
        unreachable!()
    };
    let m = command_evaluate(&a).unwrap();
    assert_eq!(m.auc.to_bits(), logged.auc.to_bits());
    assert_eq!(m.count, logged.count);

    // Longer evaluation windows cover the same answers.
    let mut reports = Vec::new();
    for len in ["512", "1024"] {
        let Command::Evaluate(a) = parse(&[
            "evaluate",
            "--data",
            s(&prep),
            "--checkpoint",
            s(&ckpt),
            "--seq-len",
            len,
            "--out",
            s(&out),
        ]) else {
            unreachable!()
        };
        reports.push(command_evaluate(&a).unwrap());
        assert!(out.join(format!("evaluate_{len}.txt")).exists());
    }
    assert_eq!(reports[0].count, reports[1].count);
    assert_eq!(reports[0].count, m.count);

    // A config that does not match the checkpoint is refused.
    let Command::Evaluate(a) = parse(&[
        "evaluate",
        "--data",
        s(&prep),
        "--checkpoint",
        s(&ckpt),
        "--set",
        "d_model=24",
    ]) else {
        unreachable!()
    };
    let err = command_evaluate(&a).unwrap_err();
    assert!(matches!(err, Error::DigestMismatch { .. }));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn single_class_validation_is_an_undefined_metric() {
    let dir = tempfile::tempdir().unwrap();
    let raw = write_raw(dir.path(), true);
    let prep = dir.path().join("prep");
    prepare_dir(&raw, &prep, "holdout_fraction=0.3");
    let out = dir.path().join("run");
    train(&prep, &out, &["--max-steps", "2"]);
    let Command::Evaluate(a) = parse(&[
        "evaluate",
        "--data",
        s(&prep),
        "--checkpoint",
        s(&out.join(CHECKPOINT_FILE)),
    ]) else {
        unreachable!()
    };
    let err = command_evaluate(&a).unwrap_err();
    assert!(matches!(err, Error::UndefinedMetric(_)), "{err}");
}

#[test]
fn simulate_writes_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let raw = synth_raw(dir.path());
    let prep = dir.path().join("prep");
    prepare_dir(&raw, &prep, "holdout_fraction=0.2");
    let run = dir.path().join("run");
    train(&prep, &run, &["--max-steps", "5"]);
    let out = dir.path().join("sim");
    let Command::Simulate(a) = parse(&[
        "simulate",
        "--data",
        s(&prep),
        "--checkpoint",
        s(&run.join(CHECKPOINT_FILE)),
        "--out",
        s(&out),
        "--group-size",
        "10",
        "--window",
        "64",
    ]) else {
        unreachable!()
    };
    let summary = command_simulate(&a).unwrap();
    assert!((summary.streaming.auc - summary.offline.auc).abs() < 1e-6);
    assert_eq!(summary.streaming.count, summary.offline.count);
    let text = fs::read_to_string(out.join(PREDICTIONS_FILE)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("row_id,answered_correctly"));
    assert_eq!(lines.count(), summary.streaming.count);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(main_with_args(["timekt", "bogus"]), 2);
    assert_eq!(main_with_args(["timekt", "train"]), 2);
    assert_eq!(main_with_args(["timekt", "--help"]), 0);
    let raw = write_raw(dir.path(), false);
    let out = dir.path().join("p");
    assert_eq!(
        main_with_args(["timekt", "prepare", "--raw", s(&raw), "--out", s(&out)]),
        0
    );
    assert_eq!(
        main_with_args([
            "timekt",
            "prepare",
            "--raw",
            s(&raw),
            "--out",
            s(&out),
            "--set",
            "no_such_key=1"
        ]),
        2
    );
    assert_eq!(
        main_with_args([
            "timekt",
            "train",
            "--data",
            s(&dir.path().join("absent")),
            "--out",
            s(&out)
        ]),
        3
    );
}
