#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_blendvoice"));
    c.env("RUST_LOG", "warn");
    c
}

pub fn run<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    bin().args(args).output().expect("binary runs")
}

pub fn run_ok<I, S>(args: I)
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    let out = run(args);
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

pub const TOY_SPEC: &str = r#"{"speakers": 2, "emotions": 2, "clips_per_pair": 2, "seed": 3}"#;

/// Small model so a few hundred steps finish in seconds.
pub fn toy_train_config(steps: usize) -> String {
    format!(
        r#"{{"steps": {steps}, "voice_pretrain_steps": 50,
 "model": {{"encoder": {{"n_mels": 40, "tcn_channels": 16, "width": 32, "heads": 2, "blocks": 1, "ff_dim": 64, "voice_width": 32}},
           "decoder": {{"width": 32, "heads": 2, "blocks": 1, "ff_dim": 64}}}}}}"#
    )
}

pub struct PipelineDirs {
    pub corpus: PathBuf,
    pub ckpt: PathBuf,
    pub pred: PathBuf,
    pub report: PathBuf,
}

/// synth-data, train, infer over every corpus clip, eval.
pub fn pipeline(root: &Path, seed: u64, steps: usize) -> PipelineDirs {
    fs::create_dir_all(root).unwrap();
    let spec = root.join("spec.json");
    let cfg = root.join("train.json");
    fs::write(&spec, TOY_SPEC).unwrap();
    fs::write(&cfg, toy_train_config(steps)).unwrap();
    let d = PipelineDirs {
        corpus: root.join("corpus"),
        ckpt: root.join("ckpt"),
        pred: root.join("pred"),
        report: root.join("report"),
    };
    let seed = seed.to_string();
    run_ok([
        "synth-data".as_ref(),
        spec.as_os_str(),
        "--out".as_ref(),
        d.corpus.as_os_str(),
        "--seed".as_ref(),
        seed.as_ref(),
    ]);
    run_ok([
        "train".as_ref(),
        d.corpus.join("manifest.jsonl").as_os_str(),
        "--config".as_ref(),
        cfg.as_os_str(),
        "--out".as_ref(),
        d.ckpt.as_os_str(),
        "--seed".as_ref(),
        seed.as_ref(),
    ]);
    run_ok([
        "infer".as_ref(),
        d.ckpt.as_os_str(),
        d.ckpt.join("library.json").as_os_str(),
        d.corpus.join("wav").as_os_str(),
        d.pred.as_os_str(),
    ]);
    run_ok([
        "eval".as_ref(),
        d.pred.as_os_str(),
        d.corpus.join("blendshapes").as_os_str(),
        "--out".as_ref(),
        d.report.as_os_str(),
    ]);
    d
}
