//! MNIST IDX ingestion, binarization, 32×32 padding, minibatch plans and a
//! synthetic Bernoulli-mixture generator.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::MultiGzDecoder;

use crate::error::{Error, Result};
use crate::sampling::{Rng, StreamId};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_SIDE: usize = 28;
pub const PADDED_SIDE: usize = 32;
const GZIP_PREFIX: [u8; 2] = [0x1f, 0x8b];

#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    /// `[count × rows·cols]`, scaled to `[0, 1]`.
    Images {
        rows: usize,
        cols: usize,
        pixels: Tensor,
    },
    Labels(Vec<u8>),
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(Error::Truncated {
            expected: offset + 4,
            actual: bytes.len(),
        })
}

/// Parses an IDX container; gzip input (leading `1f 8b`) is inflated first.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    if bytes.starts_with(&GZIP_PREFIX) {
        let mut raw = Vec::new();
        MultiGzDecoder::new(bytes)
            .read_to_end(&mut raw)
            .map_err(|e| Error::Format(format!("gzip: {e}")))?;
        return parse_idx(&raw);
    }
    let magic = be_u32(bytes, 0)?;
    match magic {
        IDX_IMAGES_MAGIC => {
            let count = be_u32(bytes, 4)? as usize;
            let rows = be_u32(bytes, 8)? as usize;
            let cols = be_u32(bytes, 12)? as usize;
            let payload = count * rows * cols;
            let expected = 16 + payload;
            if bytes.len() < expected {
                return Err(Error::Truncated {
                    expected,
                    actual: bytes.len(),
                });
            }
            if payload == 0 {
                return Err(Error::Format("IDX image file declares no pixels".into()));
            }
            let data = bytes[16..expected].iter().map(|&b| b as f64 / 255.0).collect();
            Ok(IdxData::Images {
                rows,
                cols,
                pixels: Tensor::matrix(count, rows * cols, data)?,
            })
        }
        IDX_LABELS_MAGIC => {
            let count = be_u32(bytes, 4)? as usize;
            let expected = 8 + count;
            if bytes.len() < expected {
                return Err(Error::Truncated {
                    expected,
                    actual: bytes.len(),
                });
            }
            Ok(IdxData::Labels(bytes[8..expected].to_vec()))
        }
        other => Err(Error::Format(format!(
            "unrecognised IDX magic 0x{other:08x} (expected 0x{IDX_IMAGES_MAGIC:08x} or 0x{IDX_LABELS_MAGIC:08x})"
        ))),
    }
}

pub fn read_idx(path: &Path) -> Result<IdxData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_idx(&bytes)
}

pub fn read_idx_images(path: &Path) -> Result<Tensor> {
    match read_idx(path)? {
        IdxData::Images { pixels, .. } => Ok(pixels),
        IdxData::Labels(_) => Err(Error::Format(format!("{} holds labels, not images", path.display()))),
    }
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    match read_idx(path)? {
        IdxData::Labels(l) => Ok(l),
        IdxData::Images { .. } => Err(Error::Format(format!("{} holds images, not labels", path.display()))),
    }
}

/// Images in `[0, 1]` with one integer label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        images.dims2("dataset")?;
        if images.rows() != labels.len() {
            return Err(Error::Input(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("pixels must lie in [0, 1]".into()));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    /// The first `n` rows (all rows when `n` is at least the length).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        Ok(Dataset {
            images: self.images.head_rows(n)?,
            labels: self.labels[..n].to_vec(),
        })
    }

    pub fn map_images(self, f: impl FnOnce(Tensor) -> Result<Tensor>) -> Result<Dataset> {
        Dataset::new(f(self.images)?, self.labels)
    }
}

pub fn load_mnist(images: &Path, labels: &Path) -> Result<Dataset> {
    let pixels = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    Dataset::new(pixels, labels.into_iter().map(usize::from).collect())
}

/// Turns grey levels into `{0, 1}` targets for the Bernoulli likelihood.
pub trait Binarizer: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether repeated calls return the same tensor, so the result may be cached.
    fn is_deterministic(&self) -> bool;

    fn apply(&self, images: &Tensor, seed: u64, epoch: u64) -> Tensor;
}

/// `1` iff the pixel is at least the threshold.
#[derive(Clone, Copy, Debug)]
pub struct ThresholdBinarizer {
    pub threshold: f64,
}

impl Binarizer for ThresholdBinarizer {
    fn name(&self) -> &'static str {
        "threshold"
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn apply(&self, images: &Tensor, _seed: u64, _epoch: u64) -> Tensor {
        images.map(|p| if p >= self.threshold { 1.0 } else { 0.0 })
    }
}

/// Draws each pixel as `Bernoulli(grey level)`, fresh per epoch.
#[derive(Clone, Copy, Debug)]
pub struct StochasticBinarizer;

impl Binarizer for StochasticBinarizer {
    fn name(&self) -> &'static str {
        "stochastic"
    }

    fn is_deterministic(&self) -> bool {
        false
    }

    fn apply(&self, images: &Tensor, seed: u64, epoch: u64) -> Tensor {
        let mut rng = Rng::derive(seed, StreamId::Binarize { epoch });
        let mut out = images.clone();
        for p in out.data_mut() {
            *p = if rng.uniform() < *p { 1.0 } else { 0.0 };
        }
        out
    }
}

pub const BINARIZERS: [&str; 2] = ["threshold", "stochastic"];

pub fn binarizer(name: &str, threshold: f64) -> Result<Box<dyn Binarizer>> {
    match name {
        "threshold" => Ok(Box::new(ThresholdBinarizer { threshold })),
        "stochastic" => Ok(Box::new(StochasticBinarizer)),
        other => Err(Error::Config(format!(
            "unknown binarize mode {other:?} (expected one of {BINARIZERS:?})"
        ))),
    }
}

pub fn binarize(images: &Tensor, mode: &str, threshold: f64, seed: u64) -> Result<Tensor> {
    Ok(binarizer(mode, threshold)?.apply(images, seed, 0))
}

/// Centres each 28×28 image on a zero 32×32 canvas.
pub fn pad_to_1024(images: &Tensor) -> Result<Tensor> {
    let (n, d) = images.dims2("pad_to_1024")?;
    if d != MNIST_SIDE * MNIST_SIDE {
        return Err(Error::Input(format!("pad_to_1024 expects 784 pixels per image, got {d}")));
    }
    let border = (PADDED_SIDE - MNIST_SIDE) / 2;
    let mut out = vec![0.0; n * PADDED_SIDE * PADDED_SIDE];
    for (src, dst) in images.iter_rows().zip(out.chunks_exact_mut(PADDED_SIDE * PADDED_SIDE)) {
        for r in 0..MNIST_SIDE {
            let to = (r + border) * PADDED_SIDE + border;
            dst[to..to + MNIST_SIDE].copy_from_slice(&src[r * MNIST_SIDE..(r + 1) * MNIST_SIDE]);
        }
    }
    Tensor::matrix(n, PADDED_SIDE * PADDED_SIDE, out)
}

/// Inverse of [`pad_to_1024`]: keeps the centred 28×28 window.
pub fn crop_to_784(images: &Tensor) -> Result<Tensor> {
    let (n, d) = images.dims2("crop_to_784")?;
    if d != PADDED_SIDE * PADDED_SIDE {
        return Err(Error::Input(format!("crop_to_784 expects 1024 pixels per image, got {d}")));
    }
    let border = (PADDED_SIDE - MNIST_SIDE) / 2;
    let mut out = Vec::with_capacity(n * MNIST_SIDE * MNIST_SIDE);
    for src in images.iter_rows() {
        for r in 0..MNIST_SIDE {
            let from = (r + border) * PADDED_SIDE + border;
            out.extend_from_slice(&src[from..from + MNIST_SIDE]);
        }
    }
    Tensor::matrix(n, MNIST_SIDE * MNIST_SIDE, out)
}

/// Shuffled visiting order for one epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub epoch_seed: u64,
    pub batch_size: usize,
    pub permutation: Vec<usize>,
}

impl BatchPlan {
    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.permutation.chunks(self.batch_size)
    }

    pub fn len(&self) -> usize {
        self.permutation.len().div_ceil(self.batch_size)
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }
}

/// Fisher–Yates permutation of `0..n` cut into batches of `batch_size`;
/// the final partial batch is kept.
pub fn batches(n: usize, batch_size: usize, epoch_seed: u64) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch size must be at least 1".into()));
    }
    let mut permutation: Vec<usize> = (0..n).collect();
    Rng::new(epoch_seed).shuffle(&mut permutation);
    Ok(BatchPlan {
        epoch_seed,
        batch_size,
        permutation,
    })
}

/// Samples from a `components`-way Bernoulli mixture over `d` pixels.
///
/// Component prototypes are distinct random binary patterns; each pixel is
/// on with probability 0.9 where the prototype is set and 0.1 elsewhere.
/// Components are drawn uniformly; labels record the generating component.
pub fn synthetic_bmm(n: usize, d: usize, components: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 || components == 0 {
        return Err(Error::Parameter("synthetic_bmm needs n, d, components > 0".into()));
    }
    let mut rng = Rng::new(seed);
    let prototypes = separated_patterns(&mut rng, components, d);
    let mut pixels = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.below(components);
        labels.push(c);
        for &on in &prototypes[c] {
            let p = if on { 0.9 } else { 0.1 };
            pixels.push(if rng.uniform() < p { 1.0 } else { 0.0 });
        }
    }
    Dataset::new(Tensor::matrix(n, d, pixels)?, labels)
}

/// Random binary patterns, redrawn until every pair differs in at least a
/// third of the positions.
fn separated_patterns(rng: &mut Rng, count: usize, d: usize) -> Vec<Vec<bool>> {
    let min_dist = d / 3;
    let mut out: Vec<Vec<bool>> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        let cand: Vec<bool> = (0..d).map(|_| rng.uniform() < 0.5).collect();
        attempts += 1;
        let far = out
            .iter()
            .all(|p| p.iter().zip(&cand).filter(|(a, b)| a != b).count() >= min_dist);
        if far || attempts > 10_000 {
            out.push(cand);
        }
    }
    out
}
