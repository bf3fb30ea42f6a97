//! Data loading and preprocessing shared by every command, so that the
//! vendor (encode) and the in-memory path see identical model inputs.

use std::path::Path;

use vab_core::data::{load_mnist, pad_to_1024, read_idx_images, Binarizer, Dataset, ThresholdBinarizer};
use vab_core::trainer::TrainConfig;
use vab_core::Tensor;

use crate::exit::{CliError, CliResult};

fn require(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("missing data file {}", path.display())))
    }
}

/// Images and labels, truncated to `limit` rows when it is non-zero.
pub fn load_split(images: &Path, labels: &Path, limit: usize) -> CliResult<Dataset> {
    require(images)?;
    require(labels)?;
    let data = load_mnist(images, labels).map_err(|e| CliError::data(images.display(), e))?;
    if limit > 0 {
        Ok(data.head(limit)?)
    } else {
        Ok(data)
    }
}

pub fn load_images(path: &Path, limit: usize) -> CliResult<Tensor> {
    require(path)?;
    let images = read_idx_images(path).map_err(|e| CliError::data(path.display(), e))?;
    if limit > 0 {
        Ok(images.head_rows(limit)?)
    } else {
        Ok(images)
    }
}

/// Pads 784-pixel images when the model expects 1024; any other
/// disagreement is a dimension error.
pub fn fit_to_model(images: Tensor, input_dim: usize) -> CliResult<Tensor> {
    match (images.cols(), input_dim) {
        (a, b) if a == b => Ok(images),
        (784, 1024) => Ok(pad_to_1024(&images)?),
        (a, b) => Err(CliError::Dimension(format!(
            "images have {a} pixels but the model expects {b}"
        ))),
    }
}

/// Model inputs for scoring: fitted to the model, then threshold-binarized.
pub fn model_inputs(images: Tensor, config: &TrainConfig) -> CliResult<Tensor> {
    let fitted = fit_to_model(images, config.input_dim)?;
    let threshold = ThresholdBinarizer {
        threshold: config.binarize_threshold,
    };
    Ok(threshold.apply(&fitted, 0, 0))
}
