use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "data.samples_per_relation=6",
    "data.pool_size=8",
    "model.d_model=16",
    "model.n_heads=2",
    "model.n_encoder_layers=1",
    "model.n_decoder_layers=1",
    "model.d_ff=32",
    "train.epochs=1",
    "train.max_validation_samples=5",
    "train.generation.max_len=24",
    "sampler.t=1",
];

fn zerorte(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_zerorte"));
    cmd.args(args).arg("--out-dir").arg(dir).env("RUST_LOG", "warn");
    for s in TINY {
        cmd.arg("--set").arg(s);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn unknown_setting_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = zerorte(tmp.path(), &["synth", "--set", "train.no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_config_file_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("absent.toml");
    let out = zerorte(tmp.path(), &["synth", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn split_without_corpus_exits_with_data_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = zerorte(tmp.path(), &["split"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_before_train_exits_with_data_code() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(zerorte(tmp.path(), &["synth"]).status.success());
    assert!(zerorte(tmp.path(), &["split"]).status.success());
    let out = zerorte(tmp.path(), &["eval", "--variant", "tgm"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn staged_commands_produce_a_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let synth = zerorte(dir, &["synth", "--seed", "3"]);
    assert!(synth.status.success());
    assert!(stdout(&synth).contains("samples written"));
    assert!(zerorte(dir, &["split"]).status.success());
    assert!(dir.join("config.frozen").exists());

    let train = zerorte(dir, &["train", "--variant", "tgm"]);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let eval = zerorte(dir, &["eval", "--variant", "tgm"]);
    assert!(eval.status.success());
    let table = stdout(&eval);
    assert!(table.contains("TGM [casefold_strip]") && table.contains("Baseline"), "{table}");

    let report = zerorte(dir, &["report"]);
    assert!(report.status.success());
    assert!(dir.join("reports/report.csv").exists());
    // the frozen config carries the seed given to synth
    let frozen = std::fs::read_to_string(dir.join("config.frozen")).unwrap();
    assert!(frozen.contains("seed = 3"), "{frozen}");
}

#[test]
fn zero_alpha_metric_matches_prototype_tgm() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert!(zerorte(dir, &["synth"]).status.success());
    assert!(zerorte(dir, &["split", "--style", "prototype", "--alpha", "0"]).status.success());
    for v in ["tgm", "metric"] {
        let out = zerorte(dir, &["train", "--variant", v]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(zerorte(dir, &["eval", "--variant", v]).status.success());
    }
    let tgm = std::fs::read(dir.join("predictions/tgm.jsonl")).unwrap();
    let metric = std::fs::read(dir.join("predictions/metric.jsonl")).unwrap();
    assert_eq!(tgm, metric);
}
