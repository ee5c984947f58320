#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A config small enough to run every stage in seconds: a 12³ volume in 4³
/// patches (27 tokens) and a two-block encoder.
pub fn tiny_config() -> serde_json::Value {
    serde_json::json!({
        "data": {
            "phantom": {"shape": [12, 12, 12], "patch": 4, "class_radius": 3.0},
            "count": 40, "train": 20, "test": 10
        },
        "encoder": {"dim": 16, "depth": 2, "heads": 2, "mlp_ratio": 2},
        "pretrain": {
            "epochs": 2, "warmup_epochs": 1, "batch_size": 4,
            "decoder_dim": 8, "decoder_heads": 2,
            "disc_dim": 8, "disc_depth": 1, "disc_heads": 2, "eval_masks": 1
        },
        "finetune": {"epochs": 2, "warmup_epochs": 1, "batch_size": 4, "k": 2},
        "probe": {"iterations": 50},
        "association": {"repetitions": 2, "folds": 3}
    })
}

pub fn write_config(dir: &Path, cfg: &serde_json::Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

pub fn voxformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxformer"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// Every file under `root` with its bytes, sorted by relative path.
pub fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}
