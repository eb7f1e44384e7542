//! Tiny end-to-end configuration shared by the CLI tests and the determinism
//! criterion. Every subcommand finishes in well under a second on it.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const SUBCOMMANDS: [&str; 13] = [
    "gen-data",
    "train-clf",
    "train-diff",
    "attack",
    "purify",
    "certify",
    "eval-defense",
    "sweep-eps",
    "sweep-tstar",
    "eval-adaptive",
    "eval-ood",
    "eval-quality",
    "report",
];

pub const TINY_CONFIG: &str = r#"
seed = 5
out_dir = "out"

[dataset]
kind = "shapes"
side = 12
train_per_class = 6
test_per_class = 2

[classifier]
epochs = 2

[diffusion]
steps = 10
epochs = 1

[[attacks]]
norm = "linf"
epsilon_255 = 8
steps = 3

[[attacks]]
norm = "l2"
epsilon_255 = 128
steps = 3

[guidance]
t_star = 2

[certification]
points = 2
n0 = 8
n = 16

[sweeps]
epsilon_255 = [0, 8]
t_star = [0, 1, 2]
steps = 3

[adaptive]
steps = 2
per_class = 1

[ood]
per_class = 1

[quality]
per_class = 1
columns = 3

[paths]
classifier = "out/train-clf/classifier.json"
diffusion = "out/train-diff/diffusion.json"
"#;

pub fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_distransfer")
}

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

pub fn run(config: &Path, subcommand: &str, extra: &[&str]) -> Output {
    Command::new(binary())
        .arg(subcommand)
        .arg("--config")
        .arg(config)
        .args(extra)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

/// Runs every subcommand in order and panics on a nonzero exit.
pub fn run_pipeline(config: &Path) {
    for sub in SUBCOMMANDS {
        let out = run(config, sub, &[]);
        assert!(
            out.status.success(),
            "{sub} exited with {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

/// Every file under `root`, keyed by its path relative to `root`.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                files.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    files
}

pub fn count_lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().filter(|l| !l.trim().is_empty()).count()
}
