#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

pub fn vab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vab"))
        .args(args)
        .env_remove("VAB_DATA_DIR")
        .output()
        .expect("vab binary runs")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn write_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) {
    let n = pixels.len() / (rows * cols);
    let mut bytes = vec![0, 0, 8, 3];
    for v in [n, rows, cols] {
        bytes.extend((v as u32).to_be_bytes());
    }
    bytes.extend(pixels);
    fs::write(path, bytes).unwrap();
}

pub fn write_labels(path: &Path, labels: &[u8]) {
    let mut bytes = vec![0, 0, 8, 1];
    bytes.extend((labels.len() as u32).to_be_bytes());
    bytes.extend(labels);
    fs::write(path, bytes).unwrap();
}

/// 28×28 images of three blocky digit-like classes with a little
/// deterministic speckle, written under the standard MNIST names.
pub fn tiny_mnist(dir: &Path, n_train: usize, n_test: usize) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let image = |i: usize| -> (Vec<u8>, u8) {
        let class = i % 3;
        let mut px = vec![0u8; 784];
        for r in 0..28 {
            for c in 0..28 {
                let on = match class {
                    0 => (6..22).contains(&r) && (10..18).contains(&c),
                    1 => (10..18).contains(&r) && (4..24).contains(&c),
                    _ => (r as i32 - c as i32).abs() < 4,
                };
                let speckle = (i * 31 + r * 7 + c * 13).is_multiple_of(97);
                if on != speckle {
                    px[r * 28 + c] = 230;
                }
            }
        }
        (px, class as u8)
    };
    let split = |offset: usize, n: usize| -> (Vec<u8>, Vec<u8>) {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in offset..offset + n {
            let (p, l) = image(i);
            pixels.extend(p);
            labels.push(l);
        }
        (pixels, labels)
    };
    let (p, l) = split(0, n_train);
    write_images(&dir.join(TRAIN_IMAGES), 28, 28, &p);
    write_labels(&dir.join(TRAIN_LABELS), &l);
    let (p, l) = split(n_train, n_test);
    write_images(&dir.join(TEST_IMAGES), 28, 28, &p);
    write_labels(&dir.join(TEST_LABELS), &l);
    dir.to_path_buf()
}

/// `--set` arguments for a model small enough to train in well under a second.
pub const SMALL_MODEL: [&str; 8] = ["--set", "hidden=32", "--set", "k=3", "--set", "batch=20", "--set", "trace_rows=0"];
