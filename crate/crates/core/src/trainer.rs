//! Training: configuration, initialisation, Adam, schedules, the epoch loop
//! and checkpoint persistence.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::data::{batches, binarizer, Binarizer, Dataset, ThresholdBinarizer};
use crate::error::{Error, Result};
use crate::metrics::{clustering_acc, mean_psnr};
use crate::model::{
    classify_codes, decode, elbo_and_grad_into, elbo_with_noise, hard_codes, Dense, LatentNoise, MixtureParams,
    Objective, VabParams,
};
use crate::report::RunReport;
use crate::sampling::{Rng, RngState, StreamId};
use crate::tensor::Tensor;

/// Rows per forward pass when scoring a whole dataset.
const EVAL_CHUNK: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dim_z: usize,
    pub k: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_every: usize,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub tau_schedule: String,
    pub tau0: f64,
    pub tau_min: f64,
    pub tau_anneal: f64,
    pub seed: u64,
    /// Relaxed latent draws per row (`L`).
    pub samples: usize,
    /// Encoder widths between input and code; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub input_dim: usize,
    /// Leading epochs trained on reconstruction alone.
    pub pretrain_epochs: usize,
    pub binarize: String,
    pub binarize_threshold: f64,
    /// Training rows scored for the per-epoch trace; 0 scores all.
    pub trace_rows: usize,
    /// BPP denominator.
    pub pixels_per_image: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim_z: 28,
            k: 10,
            batch: 100,
            epochs: 100,
            lr0: 1e-3,
            lr_decay: 0.9,
            lr_every: 10,
            lr_min: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            tau_schedule: "anneal".into(),
            tau0: 1.0,
            tau_min: 0.3,
            tau_anneal: 0.97,
            seed: 0,
            samples: 1,
            hidden: vec![500, 500, 2000],
            input_dim: 1024,
            pretrain_epochs: 0,
            binarize: "threshold".into(),
            binarize_threshold: 0.5,
            trace_rows: 10_000,
            pixels_per_image: 1024,
        }
    }
}

pub const CONFIG_KEYS: [&str; 24] = [
    "dim_z",
    "k",
    "batch",
    "epochs",
    "lr0",
    "lr_decay",
    "lr_every",
    "lr_min",
    "beta1",
    "beta2",
    "adam_eps",
    "tau_schedule",
    "tau0",
    "tau_min",
    "tau_anneal",
    "seed",
    "samples",
    "hidden",
    "input_dim",
    "pretrain_epochs",
    "binarize",
    "binarize_threshold",
    "trace_rows",
    "pixels_per_image",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dim_z" => self.dim_z = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr0" => self.lr0 = parse(key, value)?,
            "lr_decay" => self.lr_decay = parse(key, value)?,
            "lr_every" => self.lr_every = parse(key, value)?,
            "lr_min" => self.lr_min = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "tau_schedule" => self.tau_schedule = value.trim().to_string(),
            "tau0" => self.tau0 = parse(key, value)?,
            "tau_min" => self.tau_min = parse(key, value)?,
            "tau_anneal" => self.tau_anneal = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "samples" => self.samples = parse(key, value)?,
            "hidden" => {
                let v = value.trim();
                self.hidden = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|w| parse(key, w)).collect::<Result<_>>()?
                }
            }
            "input_dim" => self.input_dim = parse(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, value)?,
            "binarize" => self.binarize = value.trim().to_string(),
            "binarize_threshold" => self.binarize_threshold = parse(key, value)?,
            "trace_rows" => self.trace_rows = parse(key, value)?,
            "pixels_per_image" => self.pixels_per_image = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "dim_z" => self.dim_z.to_string(),
            "k" => self.k.to_string(),
            "batch" => self.batch.to_string(),
            "epochs" => self.epochs.to_string(),
            "lr0" => self.lr0.to_string(),
            "lr_decay" => self.lr_decay.to_string(),
            "lr_every" => self.lr_every.to_string(),
            "lr_min" => self.lr_min.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "tau_schedule" => self.tau_schedule.clone(),
            "tau0" => self.tau0.to_string(),
            "tau_min" => self.tau_min.to_string(),
            "tau_anneal" => self.tau_anneal.to_string(),
            "seed" => self.seed.to_string(),
            "samples" => self.samples.to_string(),
            "hidden" => self.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            "input_dim" => self.input_dim.to_string(),
            "pretrain_epochs" => self.pretrain_epochs.to_string(),
            "binarize" => self.binarize.clone(),
            "binarize_threshold" => self.binarize_threshold.to_string(),
            "trace_rows" => self.trace_rows.to_string(),
            "pixels_per_image" => self.pixels_per_image.to_string(),
            _ => return None,
        })
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are skipped; unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, value) in parse_kv(text)? {
            cfg.set(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key in [`CONFIG_KEYS`] order; reals print in shortest
    /// round-trip form, so `from_text(to_text())` is exact.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            writeln!(out, "{key}={}", self.get(key).unwrap()).unwrap();
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim_z", self.dim_z),
            ("k", self.k),
            ("batch", self.batch),
            ("epochs", self.epochs),
            ("lr_every", self.lr_every),
            ("samples", self.samples),
            ("input_dim", self.input_dim),
            ("pixels_per_image", self.pixels_per_image),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr0) {
            return Err(Error::Config("need 0 < lr_min <= lr0".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(Error::Config("need 0 < lr_decay < 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("need beta1, beta2 in [0, 1) and adam_eps > 0".into()));
        }
        if !(self.tau0 > 0.0 && self.tau_min > 0.0 && self.tau_anneal > 0.0) {
            return Err(Error::Config("temperature values must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.binarize_threshold) {
            return Err(Error::Config("binarize_threshold must lie in [0, 1]".into()));
        }
        temperature_schedule(self)?;
        binarizer(&self.binarize, self.binarize_threshold)?;
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// `key = value` pairs in file order.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// `max(lr_min, lr0 · lr_decay^⌊epoch / lr_every⌋)`.
pub fn learning_rate(config: &TrainConfig, epoch: usize) -> f64 {
    let steps = (epoch / config.lr_every).min(i32::MAX as usize) as i32;
    (config.lr0 * config.lr_decay.powi(steps)).max(config.lr_min)
}

/// Relaxation temperature per epoch.
pub trait TemperatureSchedule: Send + Sync {
    fn name(&self) -> &'static str;

    fn tau(&self, epoch: usize) -> f64;
}

/// `max(tau_min, tau0 · rate^epoch)`.
#[derive(Clone, Copy, Debug)]
pub struct Anneal {
    pub tau0: f64,
    pub rate: f64,
    pub tau_min: f64,
}

impl TemperatureSchedule for Anneal {
    fn name(&self) -> &'static str {
        "anneal"
    }

    fn tau(&self, epoch: usize) -> f64 {
        (self.tau0 * self.rate.powi(epoch.min(i32::MAX as usize) as i32)).max(self.tau_min)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Fixed(pub f64);

impl TemperatureSchedule for Fixed {
    fn name(&self) -> &'static str {
        "fixed"
    }

    fn tau(&self, _epoch: usize) -> f64 {
        self.0
    }
}

pub const TEMPERATURE_SCHEDULES: [&str; 2] = ["anneal", "fixed"];

/// The schedule named by `tau_schedule`; `fixed` holds `tau0`.
pub fn temperature_schedule(config: &TrainConfig) -> Result<Box<dyn TemperatureSchedule>> {
    match config.tau_schedule.as_str() {
        "anneal" => Ok(Box::new(Anneal {
            tau0: config.tau0,
            rate: config.tau_anneal,
            tau_min: config.tau_min,
        })),
        "fixed" => Ok(Box::new(Fixed(config.tau0))),
        other => Err(Error::Config(format!(
            "unknown tau_schedule {other:?} (expected one of {TEMPERATURE_SCHEDULES:?})"
        ))),
    }
}

/// Glorot-uniform weights, zero biases, uniform prior, component means
/// from logits uniform on `(−1, 1)`.
pub fn init_params(config: &TrainConfig, rng: &mut Rng) -> Result<VabParams> {
    let mut widths = vec![config.input_dim];
    widths.extend(&config.hidden);
    widths.push(config.dim_z);
    let mut layer = |fan_in: usize, fan_out: usize| {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.uniform_range(-limit, limit)).collect();
        Ok::<_, Error>(Dense {
            weight: Tensor::matrix(fan_in, fan_out, w)?,
            bias: Tensor::zeros(&[fan_out]),
        })
    };
    let encoder = widths.windows(2).map(|w| layer(w[0], w[1])).collect::<Result<Vec<_>>>()?;
    let decoder = widths.windows(2).rev().map(|w| layer(w[1], w[0])).collect::<Result<Vec<_>>>()?;
    let mu: Vec<f64> = (0..config.k * config.dim_z).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let mixture = MixtureParams::new(Tensor::zeros(&[config.k]), Tensor::matrix(config.k, config.dim_z, mu)?)?;
    VabParams::new(encoder, decoder, mixture)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates, one tensor per parameter tensor in
/// [`VabParams::tensors`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &VabParams) -> Self {
        Self::for_tensors(&params.tensors())
    }

    pub fn for_tensors(tensors: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = tensors.iter().map(|t| t.zeros_like()).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam descent step on the loss gradient `grads`.
pub fn adam_step(params: &mut VabParams, grads: &VabParams, state: &mut AdamState, lr: f64, hyper: AdamHyper) -> Result<()> {
    let names = params.tensor_names();
    let grads = grads.tensors();
    adam_update(&mut params.tensors_mut(), &grads, &names, state, lr, hyper, 1.0)
}

/// [`adam_step`] given the gradient of the objective being maximised.
pub fn adam_ascent_step(params: &mut VabParams, grads: &VabParams, state: &mut AdamState, lr: f64, hyper: AdamHyper) -> Result<()> {
    let names = params.tensor_names();
    let grads = grads.tensors();
    adam_update(&mut params.tensors_mut(), &grads, &names, state, lr, hyper, -1.0)
}

/// [`adam_step`] over an explicit tensor list. Nothing is modified when a
/// gradient is non-finite or mis-shaped.
pub fn adam_step_tensors(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    names: &[String],
    state: &mut AdamState,
    lr: f64,
    hyper: AdamHyper,
) -> Result<()> {
    adam_update(params, grads, names, state, lr, hyper, 1.0)
}

/// Adam on the loss gradient `sign · grads`.
fn adam_update(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    names: &[String],
    state: &mut AdamState,
    lr: f64,
    hyper: AdamHyper,
    sign: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Parameter(format!(
            "{} parameter tensors, {} gradients, {} moment tensors",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        p.expect_same_shape("adam_step", g)?;
        p.expect_same_shape("adam_step", &state.m[i])?;
        if !g.is_finite() {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("tensor {i}"));
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.t += 1;
    let t = state.t.min(i32::MAX as u64) as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            let g = sign * g;
            *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
            *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Everything needed to score or resume a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: VabParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub config: TrainConfig,
    /// Where the next epoch's shuffle stream starts.
    pub rng_state: RngState,
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VAB1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Bytes before the shape table: magic, version, config length, epoch,
/// RNG state (seed, stream, 128-bit position) and the Adam step count.
pub fn checkpoint_fixed_header_len(config_text_len: usize) -> usize {
    4 + 4 + 4 + config_text_len + 8 + (8 + 8 + 16) + 8
}

impl Checkpoint {
    /// Layout, all integers and reals little-endian:
    ///
    /// ```text
    /// "VAB1" | version u32 | config_len u32 | config text | epoch u64
    /// | rng seed u64 | rng stream u64 | rng word_pos u128 | adam t u64
    /// | tensor count u32 | per tensor: rank u32, extents u64 × rank
    /// | params f64… | adam m f64… | adam v f64…
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.config.to_text();
        let tensors = self.params.tensors();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        out.extend((cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend((self.epoch as u64).to_le_bytes());
        out.extend(self.rng_state.seed.to_le_bytes());
        out.extend(self.rng_state.stream.to_le_bytes());
        out.extend(self.rng_state.word_pos.to_le_bytes());
        out.extend(self.adam.t.to_le_bytes());
        out.extend((tensors.len() as u32).to_le_bytes());
        for t in &tensors {
            out.extend((t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend((e as u64).to_le_bytes());
            }
        }
        for group in [tensors, self.adam.m.iter().collect(), self.adam.v.iter().collect()] {
            for t in group {
                for v in t.data() {
                    out.extend(v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC.to_vec(),
                found: magic.to_vec(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| Error::Format("checkpoint config block is not UTF-8".into()))?;
        let config = TrainConfig::from_text(cfg_text)?;
        let epoch = r.u64()? as usize;
        let rng_state = RngState {
            seed: r.u64()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.take(16)?.try_into().unwrap()),
        };
        let t = r.u64()?;
        let count = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            shapes.push(shape);
        }
        let mut template = init_shapes(&config)?;
        let expected: Vec<Vec<usize>> = template.tensors().iter().map(|t| t.shape().to_vec()).collect();
        if shapes != expected {
            return Err(Error::Format("checkpoint shape table does not match its config".into()));
        }
        let mut read_group = |targets: Vec<&mut Tensor>| -> Result<()> {
            for t in targets {
                for v in t.data_mut() {
                    *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
                }
            }
            Ok(())
        };
        read_group(template.tensors_mut())?;
        let mut adam = AdamState::new(&template);
        read_group(adam.m.iter_mut().collect())?;
        read_group(adam.v.iter_mut().collect())?;
        adam.t = t;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            params: template,
            adam,
            epoch,
            config,
            rng_state,
        })
    }
}

/// Zero parameters with the architecture `config` describes.
fn init_shapes(config: &TrainConfig) -> Result<VabParams> {
    Ok(init_params(config, &mut Rng::new(0))?.zeros_like())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            expected: self.pos.saturating_add(n),
            actual: self.bytes.len(),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Test-set style scores of a model on binarized inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub acc: f64,
    pub psnr_db: f64,
    pub elbo: f64,
}

/// ACC of [`assign_clusters`], mean per-image PSNR of the hard-code
/// reconstructions, and an ELBO estimate under fixed evaluation noise.
pub fn evaluate(params: &VabParams, x: &Tensor, labels: &[usize], tau: f64, seed: u64) -> Result<Evaluation> {
    let n = x.rows();
    if n != labels.len() {
        return Err(Error::Input(format!("{n} rows but {} labels", labels.len())));
    }
    let (pred, psnr_db) = score_chunked(params, x)?;
    let mut rng = Rng::derive(seed, StreamId::Eval);
    let mut elbo_sum = 0.0;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let chunk = x.select_rows(&idx)?;
        let noise = LatentNoise::sample(&mut rng, 1, idx.len(), params.dim_z());
        elbo_sum += elbo_with_noise(params, &chunk, &noise, tau)?.total * idx.len() as f64;
    }
    Ok(Evaluation {
        acc: clustering_acc(&pred, labels, params.k())?,
        psnr_db,
        elbo: elbo_sum / n as f64,
    })
}

/// Why a run stopped early, with the state at the end of the last
/// epoch that finished cleanly.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub last_good: Checkpoint,
    pub trace: Vec<RunReport>,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training stopped after {} epochs: {}", self.last_good.epoch, self.error)
    }
}

impl std::error::Error for TrainFailure {}

pub struct Trainer<'a> {
    config: TrainConfig,
    schedule: Box<dyn TemperatureSchedule>,
    binarizer: Box<dyn Binarizer>,
    data: &'a Dataset,
    /// Binarized training targets, cached when the binarizer is deterministic.
    fixed_targets: Option<Tensor>,
    /// Threshold-binarized rows scored for the trace, with their labels.
    trace_x: Tensor,
    trace_labels: Vec<usize>,
    params: VabParams,
    adam: AdamState,
    epoch: usize,
    /// State after the most recent epoch that completed cleanly.
    last_good: (VabParams, AdamState, usize),
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, data: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, &mut Rng::derive(config.seed, StreamId::Init))?;
        let adam = AdamState::new(&params);
        Self::assemble(config, data, params, adam, 0)
    }

    /// Continues a run from a checkpoint.
    pub fn resume(ckpt: Checkpoint, data: &'a Dataset) -> Result<Self> {
        Self::assemble(ckpt.config, data, ckpt.params, ckpt.adam, ckpt.epoch)
    }

    fn assemble(config: TrainConfig, data: &'a Dataset, params: VabParams, adam: AdamState, epoch: usize) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        if data.dim() != config.input_dim {
            return Err(Error::dim("train", &[data.len(), data.dim()], &[data.len(), config.input_dim]));
        }
        let schedule = temperature_schedule(&config)?;
        let binarizer = binarizer(&config.binarize, config.binarize_threshold)?;
        let fixed_targets = binarizer
            .is_deterministic()
            .then(|| binarizer.apply(&data.images, config.seed, 0));
        let rows = if config.trace_rows == 0 { data.len() } else { config.trace_rows.min(data.len()) };
        let threshold = ThresholdBinarizer {
            threshold: config.binarize_threshold,
        };
        let trace_x = threshold.apply(&data.images.head_rows(rows)?, 0, 0);
        Ok(Self {
            last_good: (params.clone(), adam.clone(), epoch),
            trace_labels: data.labels[..rows].to_vec(),
            trace_x,
            config,
            schedule,
            binarizer,
            data,
            fixed_targets,
            params,
            adam,
            epoch,
        })
    }

    pub fn params(&self) -> &VabParams {
        &self.params
    }

    /// Direct access for tests that need to perturb a run.
    pub fn params_mut(&mut self) -> &mut VabParams {
        &mut self.params
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn tau(&self, epoch: usize) -> f64 {
        self.schedule.tau(epoch)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            config: self.config.clone(),
            rng_state: Rng::derive(self.config.seed, StreamId::Shuffle { epoch: self.epoch as u64 }).state(),
        }
    }

    /// One pass over the data. On error the trainer may hold a partially
    /// updated model; [`Trainer::run`] restores the last clean epoch.
    pub fn run_epoch(&mut self) -> Result<RunReport> {
        let started = Instant::now();
        let cfg = &self.config;
        let epoch = self.epoch;
        let tau = self.schedule.tau(epoch);
        let lr = learning_rate(cfg, epoch);
        let objective = if epoch < cfg.pretrain_epochs {
            Objective::ReconstructionOnly
        } else {
            Objective::Full
        };
        let fresh;
        let targets = match &self.fixed_targets {
            Some(t) => t,
            None => {
                fresh = self.binarizer.apply(&self.data.images, cfg.seed, epoch as u64);
                &fresh
            }
        };
        let shuffle_seed = Rng::derive(cfg.seed, StreamId::Shuffle { epoch: epoch as u64 }).next_u64();
        let plan = batches(self.data.len(), cfg.batch, shuffle_seed)?;
        let mut elbo_sum = 0.0;
        let mut grads = self.params.zeros_like();
        for (b, idx) in plan.iter().enumerate() {
            let x = targets.select_rows(idx)?;
            let mut rng = Rng::derive(
                cfg.seed,
                StreamId::Noise {
                    epoch: epoch as u64,
                    batch: b as u64,
                },
            );
            let noise = LatentNoise::sample(&mut rng, cfg.samples, idx.len(), cfg.dim_z);
            let breakdown = elbo_and_grad_into(&self.params, &x, &noise, tau, objective, &mut grads)?;
            elbo_sum += breakdown.total * idx.len() as f64;
            adam_ascent_step(&mut self.params, &grads, &mut self.adam, lr, cfg.adam())?;
        }
        if !self.params.is_finite() {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }
        let (labels, psnr) = score_chunked(&self.params, &self.trace_x)?;
        let acc = clustering_acc(&labels, &self.trace_labels, cfg.k)?;
        self.epoch += 1;
        self.last_good = (self.params.clone(), self.adam.clone(), self.epoch);
        Ok(RunReport::new(
            cfg.dim_z,
            cfg.pixels_per_image,
            cfg.seed,
            self.epoch,
            acc,
            psnr,
            elbo_sum / self.data.len() as f64,
            started.elapsed().as_secs_f64(),
        ))
    }

    /// Trains until `config.epochs` epochs are complete.
    pub fn run(mut self) -> std::result::Result<(Checkpoint, Vec<RunReport>), Box<TrainFailure>> {
        self.run_with(|_| {})
    }

    /// [`Trainer::run`], calling `observe` after every epoch.
    pub fn run_with(
        &mut self,
        mut observe: impl FnMut(&RunReport),
    ) -> std::result::Result<(Checkpoint, Vec<RunReport>), Box<TrainFailure>> {
        let mut trace = Vec::new();
        while self.epoch < self.config.epochs {
            match self.run_epoch() {
                Ok(report) => {
                    observe(&report);
                    trace.push(report);
                }
                Err(error) => {
                    (self.params, self.adam, self.epoch) = self.last_good.clone();
                    return Err(Box::new(TrainFailure {
                        error,
                        last_good: self.checkpoint(),
                        trace,
                    }));
                }
            }
        }
        Ok((self.checkpoint(), trace))
    }
}

/// Cluster ids and mean per-image PSNR of the hard-code reconstructions,
/// encoding each row once.
fn score_chunked(params: &VabParams, x: &Tensor) -> Result<(Vec<usize>, f64)> {
    let mut ids = Vec::with_capacity(x.rows());
    let mut psnr_sum = 0.0;
    for start in (0..x.rows()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(x.rows())).collect();
        let chunk = x.select_rows(&idx)?;
        let codes = hard_codes(params, &chunk)?;
        ids.extend(classify_codes(&params.mixture, &codes)?);
        psnr_sum += mean_psnr(&chunk, &decode(params, &codes)?)? * idx.len() as f64;
    }
    Ok((ids, psnr_sum / x.rows() as f64))
}

/// Trains from scratch for `config.epochs` epochs.
pub fn train(config: TrainConfig, data: &Dataset) -> std::result::Result<(Checkpoint, Vec<RunReport>), Box<TrainFailure>> {
    let trainer = Trainer::new(config, data).map_err(|error| {
        Box::new(TrainFailure {
            error,
            last_good: placeholder_checkpoint(),
            trace: Vec::new(),
        })
    })?;
    trainer.run()
}

/// Stand-in for failures raised before any state exists.
fn placeholder_checkpoint() -> Checkpoint {
    let config = TrainConfig {
        hidden: Vec::new(),
        input_dim: 1,
        dim_z: 1,
        k: 1,
        ..TrainConfig::default()
    };
    let params = init_params(&config, &mut Rng::new(0)).expect("minimal architecture is valid");
    Checkpoint {
        adam: AdamState::new(&params),
        params,
        epoch: 0,
        rng_state: Rng::new(0).state(),
        config,
    }
}
