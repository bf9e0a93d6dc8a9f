#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub const TINY_CONFIG: &str = "\
# small enough to train in well under a second
dataset = two_moons
n_samples = 200
noise = 0.1
labeled_per_class = 2
total_steps = 20
batch_size = 4
mu = 2
unlabeled_bank_size = 32
topn = 4
eval_every = 5
hidden_dims = 16
feature_dim = 8
proj_hidden = 8
proj_dim = 4
seed = 3
";

pub fn simmatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simmatch"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

pub fn parse_matrix(text: &str) -> Vec<Vec<f64>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|v| v.trim().parse().unwrap()).collect())
        .collect()
}
