//! One row of results: the quantities plotted against bitrate.

use crate::metrics::{bpp, mean_and_stderr};

/// Column order of every results and trace CSV.
pub const REPORT_COLUMNS: [&str; 8] = ["dim_z", "bpp", "seed", "epochs", "acc", "psnr_db", "elbo", "wall_seconds"];

/// Extra columns carried by sweep summary rows.
pub const SUMMARY_COLUMNS: [&str; 3] = ["acc_stderr", "psnr_stderr", "acc_best"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub dim_z: usize,
    pub bpp: f64,
    pub seed: u64,
    pub epochs: usize,
    pub acc: f64,
    /// `+∞` for a perfect reconstruction, written as `inf`.
    pub psnr_db: f64,
    pub elbo: f64,
    pub wall_seconds: f64,
}

impl RunReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dim_z: usize,
        pixels_per_image: usize,
        seed: u64,
        epochs: usize,
        acc: f64,
        psnr_db: f64,
        elbo: f64,
        wall_seconds: f64,
    ) -> Self {
        Self {
            dim_z,
            bpp: bpp(dim_z, pixels_per_image),
            seed,
            epochs,
            acc,
            psnr_db,
            elbo,
            wall_seconds,
        }
    }

    /// Fields in [`REPORT_COLUMNS`] order. Reals use the shortest text that
    /// parses back to the same value.
    pub fn fields(&self) -> Vec<String> {
        vec![
            self.dim_z.to_string(),
            format_real(self.bpp),
            self.seed.to_string(),
            self.epochs.to_string(),
            format_real(self.acc),
            format_real(self.psnr_db),
            format_real(self.elbo),
            format_real(self.wall_seconds),
        ]
    }
}

pub fn format_real(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        v.to_string()
    }
}

/// Mean row over seeds plus the spread of ACC and PSNR.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSummary {
    pub mean: RunReport,
    pub acc_stderr: f64,
    pub psnr_stderr: f64,
    pub acc_best: f64,
}

impl SweepSummary {
    /// Summarises runs that share one `dim_z`; `None` when `runs` is empty.
    /// The seed field of the mean row holds the number of runs; the CSV
    /// form prints `mean` there instead.
    pub fn from_runs(runs: &[RunReport]) -> Option<Self> {
        let first = runs.first()?;
        let col = |f: fn(&RunReport) -> f64| runs.iter().map(f).collect::<Vec<_>>();
        let (acc, acc_se) = mean_and_stderr(&col(|r| r.acc));
        let (psnr, psnr_se) = mean_and_stderr(&col(|r| r.psnr_db));
        let (elbo, _) = mean_and_stderr(&col(|r| r.elbo));
        let (wall, _) = mean_and_stderr(&col(|r| r.wall_seconds));
        Some(Self {
            mean: RunReport {
                dim_z: first.dim_z,
                bpp: first.bpp,
                seed: runs.len() as u64,
                epochs: first.epochs,
                acc,
                psnr_db: psnr,
                elbo,
                wall_seconds: wall,
            },
            acc_stderr: acc_se,
            psnr_stderr: psnr_se,
            acc_best: runs.iter().map(|r| r.acc).fold(f64::NEG_INFINITY, f64::max),
        })
    }

    pub fn fields(&self) -> Vec<String> {
        let mut out = self.mean.fields();
        out[2] = "mean".into();
        out.extend([self.acc_stderr, self.psnr_stderr, self.acc_best].map(format_real));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bpp_field_reconstructs_from_dim_z() {
        let r = RunReport::new(28, 1024, 3, 100, 0.5, f64::INFINITY, -90.0, 1.5);
        let fields = r.fields();
        assert_eq!(fields.len(), REPORT_COLUMNS.len());
        assert_eq!(fields[1], "0.02734375");
        assert_eq!(fields[1].parse::<f64>().unwrap(), 28.0 / 1024.0);
        assert_eq!(fields[5], "inf");
    }

    #[test]
    fn summary_mean_and_stderr() {
        let runs: Vec<RunReport> = [0.4, 0.5, 0.6]
            .iter()
            .enumerate()
            .map(|(s, &acc)| RunReport::new(10, 1024, s as u64, 5, acc, 10.0 + s as f64, -1.0, 1.0))
            .collect();
        let s = SweepSummary::from_runs(&runs).unwrap();
        assert!((s.mean.acc - 0.5).abs() < 1e-12);
        assert!((s.acc_stderr - 0.1 / 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.acc_best, 0.6);
        assert_eq!(s.fields().len(), REPORT_COLUMNS.len() + SUMMARY_COLUMNS.len());
        assert!(SweepSummary::from_runs(&[]).is_none());
    }
}
