//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use divatt::synth;

pub fn divatt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_divatt"))
}

pub fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn divatt")
}

pub fn stdout_of(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

pub fn stderr_of(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

/// Tiny two-domain task written out as real data files.
pub struct DataDir {
    pub _tmp: tempfile::TempDir,
    pub root: PathBuf,
    pub train: PathBuf,
    pub unlabeled: PathBuf,
    pub test: PathBuf,
    pub embeddings: PathBuf,
}

pub fn write_data() -> DataDir {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let data = synth::two_domain(synth::TwoDomainConfig {
        n_source: 60,
        n_unlabeled: 40,
        n_target: 40,
        ..synth::TwoDomainConfig::default()
    });
    let train = root.join("train.tsv");
    let unlabeled = root.join("unlabeled.txt");
    let test = root.join("test.tsv");
    let embeddings = root.join("vectors.txt");
    synth::write_labeled(&train, &data.source_labeled).unwrap();
    synth::write_unlabeled(&unlabeled, &data.source_unlabeled).unwrap();
    synth::write_labeled(&test, &data.target_test).unwrap();
    synth::write_embeddings(&embeddings, &data.embedding_rows).unwrap();
    DataDir { _tmp: tmp, root, train, unlabeled, test, embeddings }
}

pub fn train_args(d: &DataDir, out: &Path) -> Vec<String> {
    [
        "train",
        "--variant", "mhad",
        "--train", d.train.to_str().unwrap(),
        "--embeddings", d.embeddings.to_str().unwrap(),
        "--output-dir", out.to_str().unwrap(),
        "--hidden", "4",
        "--heads", "3",
        "--max-len", "12",
        "--max-epochs", "2",
        "--patience", "0",
        "--batch-size", "16",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}
