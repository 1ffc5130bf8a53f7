#![allow(dead_code)]

use std::path::{Path, PathBuf};

use reverbswap::audio::{save_wav, synthetic_vocal, CANONICAL_RATE};

/// Writes `n` synthetic dry vocals of `frames` samples into `dir`.
pub fn write_corpus(dir: &Path, n: usize, frames: usize) -> Vec<PathBuf> {
    std::fs::create_dir_all(dir).unwrap();
    (0..n)
        .map(|i| {
            let p = dir.join(format!("vocal_{i:02}.wav"));
            save_wav(&synthetic_vocal(i as u64, frames, CANONICAL_RATE), &p).unwrap();
            p
        })
        .collect()
}

pub fn args(items: &[&str]) -> Vec<String> {
    std::iter::once("reverbswap").chain(items.iter().copied()).map(String::from).collect()
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}
