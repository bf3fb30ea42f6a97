//! The `key=value` run configuration: every training key plus where data
//! comes from and where results go.

use std::fs;
use std::path::{Path, PathBuf};

use vab_core::trainer::{parse_kv, TrainConfig};

use crate::exit::{CliError, CliResult};

pub const DATA_DIR_ENV: &str = "VAB_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "data/mnist";

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data_dir: Option<PathBuf>,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Centre 28×28 images on a 32×32 canvas before training.
    pub pad: bool,
    /// Use only the first rows of each split; 0 keeps everything.
    pub train_limit: usize,
    pub test_limit: usize,
    /// Whether `input_dim` was set explicitly rather than left to the data.
    pub input_dim_fixed: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data_dir: None,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            out_dir: PathBuf::from("results"),
            pad: true,
            train_limit: 0,
            test_limit: 0,
            input_dim_fixed: false,
        }
    }
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Other(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_usize(key: &str, value: &str) -> CliResult<usize> {
    value
        .parse()
        .map_err(|_| CliError::Other(format!("{key}: expected a non-negative integer, got {value:?}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let path = || Some(PathBuf::from(value));
        match key {
            "data_dir" => self.data_dir = path(),
            "train_images" => self.train_images = path(),
            "train_labels" => self.train_labels = path(),
            "test_images" => self.test_images = path(),
            "test_labels" => self.test_labels = path(),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "pad" => self.pad = parse_bool(key, value)?,
            "train_limit" => self.train_limit = parse_usize(key, value)?,
            "test_limit" => self.test_limit = parse_usize(key, value)?,
            _ => {
                self.train.set(key, value).map_err(|e| CliError::Other(e.to_string()))?;
                if key == "input_dim" {
                    self.input_dim_fixed = true;
                }
            }
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then `key=value` overrides in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Other(format!("cannot read config {}: {e}", path.display())))?;
            for (k, v) in parse_kv(&text).map_err(|e| CliError::Other(e.to_string()))? {
                cfg.set(&k, &v)?;
            }
        }
        for item in overrides {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| CliError::Other(format!("--set expects key=value, got {item:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate().map_err(|e| CliError::Other(e.to_string()))
    }

    /// Explicit path, else the file name inside the data directory. A `.gz`
    /// sibling is used when only the compressed file exists.
    pub fn resolve(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        if let Some(p) = explicit {
            return p.clone();
        }
        let plain = data_dir(self.data_dir.as_deref()).join(name);
        let gz = plain.with_extension("gz");
        if !plain.exists() && gz.exists() {
            gz
        } else {
            plain
        }
    }
}

/// `dir`, else `$VAB_DATA_DIR`, else `data/mnist`.
pub fn data_dir(dir: Option<&Path>) -> PathBuf {
    dir.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}
