//! Clustering accuracy under the best label mapping, PSNR and bits per pixel.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `counts[p][t]` = number of samples with predicted id `p` and true id `t`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
}

impl ContingencyTable {
    pub fn from_labels(pred: &[usize], truth: &[usize], k_pred: usize, k_true: usize) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::Input(format!(
                "prediction length {} differs from label length {}",
                pred.len(),
                truth.len()
            )));
        }
        let mut counts = vec![vec![0u64; k_true]; k_pred];
        for (&p, &t) in pred.iter().zip(truth) {
            if p >= k_pred || t >= k_true {
                return Err(Error::Input(format!(
                    "label pair ({p}, {t}) outside {k_pred}×{k_true}"
                )));
            }
            counts[p][t] += 1;
        }
        Ok(Self { counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

/// Optimal assignment of rows to columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `mapping[row]` is the assigned column, `None` for rows matched to a
    /// padding column of a rectangular input.
    pub mapping: Vec<Option<usize>>,
    /// Sum of the costs of the real (non-padding) pairs.
    pub cost: f64,
}

/// Minimum-cost perfect matching (Kuhn–Munkres with potentials, O(n³)).
///
/// Rectangular inputs are padded to square with zero-cost dummy rows or
/// columns.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let rows = cost.len();
    if rows == 0 {
        return Ok(Assignment {
            mapping: Vec::new(),
            cost: 0.0,
        });
    }
    let cols = cost[0].len();
    if cost.iter().any(|r| r.len() != cols) {
        return Err(Error::Input("ragged cost matrix".into()));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Input("cost matrix contains a non-finite entry".into()));
    }
    let n = rows.max(cols);
    let at = |i: usize, j: usize| if i < rows && j < cols { cost[i][j] } else { 0.0 };

    // 1-based arrays; index 0 is the virtual root of each augmenting search.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = at(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut mapping = vec![None; rows];
    let mut total = 0.0;
    for j in 1..=n {
        let i = owner[j] - 1;
        if i < rows && j - 1 < cols {
            mapping[i] = Some(j - 1);
            total += cost[i][j - 1];
        }
    }
    Ok(Assignment {
        mapping,
        cost: total,
    })
}

/// Fraction of samples whose true label equals the image of their cluster
/// under the best injective cluster→label mapping.
pub fn clustering_acc(pred: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Input("no samples to score".into()));
    }
    let k_pred = k.max(pred.iter().max().map_or(0, |m| m + 1));
    let k_true = truth.iter().max().map_or(0, |m| m + 1);
    let table = ContingencyTable::from_labels(pred, truth, k_pred, k_true)?;
    let negated: Vec<Vec<f64>> = table
        .counts
        .iter()
        .map(|row| row.iter().map(|&c| -(c as f64)).collect())
        .collect();
    let assignment = hungarian(&negated)?;
    Ok(-assignment.cost / pred.len() as f64)
}

/// `10·log10(1 / MSE)` for signals in `[0, 1]`; `+∞` when the inputs are identical.
pub fn psnr(original: &Tensor, reconstructed: &Tensor) -> Result<f64> {
    original.expect_same_shape("psnr", reconstructed)?;
    Ok(psnr_slices(original.data(), reconstructed.data()))
}

fn psnr_slices(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Mean of per-row (per-image) PSNR values.
pub fn mean_psnr(original: &Tensor, reconstructed: &Tensor) -> Result<f64> {
    original.expect_same_shape("mean_psnr", reconstructed)?;
    let total: f64 = original
        .iter_rows()
        .zip(reconstructed.iter_rows())
        .map(|(a, b)| psnr_slices(a, b))
        .sum();
    Ok(total / original.rows() as f64)
}

/// Bits per pixel of a `dim_z`-bit code.
pub fn bpp(dim_z: usize, pixels_per_image: usize) -> f64 {
    dim_z as f64 / pixels_per_image as f64
}

/// Arithmetic mean and standard error of the mean (sample sd / √n).
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
