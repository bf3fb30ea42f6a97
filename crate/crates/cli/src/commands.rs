use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use vab_core::baselines::MethodRegistry;
use vab_core::codec::CodeFile;
use vab_core::metrics::{clustering_acc, mean_and_stderr};
use vab_core::model::{classify_codes, hard_codes};
use vab_core::report::{format_real, RunReport, SweepSummary, REPORT_COLUMNS, SUMMARY_COLUMNS};
use vab_core::trainer::{evaluate, load_checkpoint, save_checkpoint, temperature_schedule, Checkpoint, Trainer};
use vab_core::Error;

use crate::config::{RunConfig, TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};
use crate::exit::{CliError, CliResult};
use crate::pipeline::{load_images, load_split, model_inputs};

const AFTER_HELP: &str = "\
Exit codes:
  0  success
  1  other failure (bad config, I/O, training diverged)
  2  data file missing or unreadable
  3  input dimension does not match the model
  4  unknown baseline method
  5  code file header unreadable or inconsistent with the checkpoint

Data files default to the standard MNIST names inside --data-dir, the
VAB_DATA_DIR environment variable, or ./data/mnist, in that order.";

#[derive(Parser, Debug)]
#[command(name = "vab", version, about = "Bernoulli-latent VAE with a mixture prior: compress and cluster", after_help = AFTER_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write a checkpoint plus a per-epoch trace CSV.
    Train(TrainArgs),
    /// Score a checkpoint on the test split and append a results row.
    Eval(EvalArgs),
    /// Cluster raw test pixels with a classical method over several seeds.
    Baseline(BaselineArgs),
    /// Train and evaluate every (dim_z, seed) pair.
    Sweep(SweepArgs),
    /// Compress images into a code file.
    Encode(EncodeArgs),
    /// Assign clusters to the codes in a code file.
    Classify(ClassifyArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub dim_z: Option<usize>,
    /// Use only the first N training images.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Use only the first N test images.
    #[arg(long)]
    pub test_limit: Option<usize>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.set)?;
        if let Some(d) = &self.data_dir {
            cfg.data_dir = Some(d.clone());
        }
        if let Some(d) = &self.out_dir {
            cfg.out_dir = d.clone();
        }
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.dim_z {
            cfg.train.dim_z = v;
        }
        if let Some(v) = self.train_limit {
            cfg.train_limit = v;
        }
        if let Some(v) = self.test_limit {
            cfg.test_limit = v;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Checkpoint path (default: <out_dir>/checkpoint.vab).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Trace CSV path (default: <out_dir>/trace.csv).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Results CSV to append to (default: <out_dir>/results.csv).
    #[arg(long)]
    pub results: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    /// Clustering method: kmeans or gmm.
    #[arg(long)]
    pub method: String,
    /// Number of seeds, run as 0..N (offset by --seed-start).
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed_start: u64,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Output CSV (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Comma-separated code lengths.
    #[arg(long, value_delimiter = ',', default_value = "10,16,28,64")]
    pub dims: Vec<usize>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
    /// Results CSV (default: <out_dir>/sweep.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// IDX image file to compress.
    #[arg(long)]
    pub images: PathBuf,
    /// Encode only the first N images.
    #[arg(long, default_value_t = 0)]
    pub limit: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub codes: PathBuf,
    /// Where to write one cluster id per line (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Baseline(a) => cmd_baseline(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Encode(a) => cmd_encode(&a),
        Command::Classify(a) => cmd_classify(&a),
    }
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn open_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    load_checkpoint(path).map_err(|e| CliError::Other(format!("checkpoint {}: {e}", path.display())))
}

/// CSV writer that adds the header only when the file is new or empty.
fn append_csv(path: &Path, header: &[&str]) -> CliResult<csv::Writer<File>> {
    ensure_parent(path)?;
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(header)?;
        w.flush()?;
    }
    Ok(w)
}

fn create_csv(path: &Path, header: &[&str]) -> CliResult<csv::Writer<File>> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_writer(File::create(path)?);
    w.write_record(header)?;
    w.flush()?;
    Ok(w)
}

/// Loads the training split and runs the trainer, streaming the trace.
fn train_run(cfg: &RunConfig, trace_path: &Path, quiet: bool) -> CliResult<(Checkpoint, Vec<RunReport>)> {
    let images = cfg.resolve(&cfg.train_images, TRAIN_IMAGES);
    let labels = cfg.resolve(&cfg.train_labels, TRAIN_LABELS);
    let data = load_split(&images, &labels, cfg.train_limit)?;
    let mut train_cfg = cfg.train.clone();
    let target_dim = if cfg.pad && data.dim() == 784 { 1024 } else { data.dim() };
    if !cfg.input_dim_fixed {
        train_cfg.input_dim = target_dim;
    }
    let data = data.map_images(|x| if target_dim != x.cols() { vab_core::data::pad_to_1024(&x) } else { Ok(x) })?;
    if data.dim() != train_cfg.input_dim {
        return Err(CliError::Dimension(format!(
            "training images have {} pixels but input_dim is {}",
            data.dim(),
            train_cfg.input_dim
        )));
    }
    let mut trace = create_csv(trace_path, &REPORT_COLUMNS)?;
    let total = train_cfg.epochs;
    let mut trainer = Trainer::new(train_cfg, &data)?;
    let mut write_err = None;
    let outcome = trainer.run_with(|r| {
        if !quiet {
            eprintln!(
                "epoch {}/{total}  elbo {:.3}  acc {:.4}  psnr {:.2} dB  ({:.1} s)",
                r.epochs, r.elbo, r.acc, r.psnr_db, r.wall_seconds
            );
        }
        if let Err(e) = trace.write_record(r.fields()).and_then(|_| trace.flush().map_err(Into::into)) {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(e.into());
    }
    outcome.map_err(|failure| {
        let path = trace_path.with_file_name("last_good.vab");
        let saved = save_checkpoint(&failure.last_good, &path).is_ok();
        CliError::Other(format!(
            "{failure}{}",
            if saved { format!("; last good state saved to {}", path.display()) } else { String::new() }
        ))
    })
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let cfg = a.common.resolve()?;
    cfg.validate()?;
    let ckpt_path = a.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("checkpoint.vab"));
    let trace_path = a.trace.clone().unwrap_or_else(|| cfg.out_dir.join("trace.csv"));
    let (ckpt, _) = train_run(&cfg, &trace_path, a.quiet)?;
    ensure_parent(&ckpt_path)?;
    save_checkpoint(&ckpt, &ckpt_path)?;
    if !a.quiet {
        eprintln!("wrote {} and {}", ckpt_path.display(), trace_path.display());
    }
    Ok(())
}

/// Test-split scores of a checkpoint as a report row.
fn eval_report(ckpt: &Checkpoint, cfg: &RunConfig, started: Instant) -> CliResult<RunReport> {
    let images = cfg.resolve(&cfg.test_images, TEST_IMAGES);
    let labels = cfg.resolve(&cfg.test_labels, TEST_LABELS);
    let test = load_split(&images, &labels, cfg.test_limit)?;
    let x = model_inputs(test.images, &ckpt.config)?;
    let tau = temperature_schedule(&ckpt.config)?.tau(ckpt.epoch.saturating_sub(1));
    let e = evaluate(&ckpt.params, &x, &test.labels, tau, ckpt.config.seed)?;
    Ok(RunReport::new(
        ckpt.config.dim_z,
        ckpt.config.pixels_per_image,
        ckpt.config.seed,
        ckpt.epoch,
        e.acc,
        e.psnr_db,
        e.elbo,
        started.elapsed().as_secs_f64(),
    ))
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let started = Instant::now();
    let cfg = a.common.resolve()?;
    let ckpt = open_checkpoint(&a.checkpoint)?;
    let report = eval_report(&ckpt, &cfg, started)?;
    let path = a.results.clone().unwrap_or_else(|| cfg.out_dir.join("results.csv"));
    let mut w = append_csv(&path, &REPORT_COLUMNS)?;
    w.write_record(report.fields())?;
    w.flush()?;
    println!(
        "dim_z {}  bpp {}  acc {:.4}  psnr {} dB  elbo {:.3}",
        report.dim_z,
        format_real(report.bpp),
        report.acc,
        format_real(report.psnr_db),
        report.elbo
    );
    Ok(())
}

pub const BASELINE_COLUMNS: [&str; 6] = ["method", "seed", "k", "acc", "acc_stderr", "wall_seconds"];

pub fn cmd_baseline(a: &BaselineArgs) -> CliResult<()> {
    let registry = MethodRegistry::with_baselines();
    let method = registry.get(&a.method).map_err(|e| CliError::Method(e.to_string()))?;
    if a.seeds == 0 {
        return Err(CliError::Other("--seeds must be at least 1".into()));
    }
    let cfg = a.common.resolve()?;
    let images = cfg.resolve(&cfg.test_images, TEST_IMAGES);
    let labels = cfg.resolve(&cfg.test_labels, TEST_LABELS);
    let test = load_split(&images, &labels, cfg.test_limit)?;

    let sink: Box<dyn Write> = match &a.out {
        Some(p) => {
            ensure_parent(p)?;
            Box::new(File::create(p)?)
        }
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(BufWriter::new(sink));
    w.write_record(BASELINE_COLUMNS)?;
    let mut accs = Vec::new();
    let mut walls = Vec::new();
    for seed in a.seed_start..a.seed_start + a.seeds {
        let started = Instant::now();
        let pred = method.fit_predict(&test.images, a.k, seed)?;
        let acc = clustering_acc(&pred, &test.labels, a.k)?;
        let wall = started.elapsed().as_secs_f64();
        w.write_record([method.name().to_string(), seed.to_string(), a.k.to_string(), format_real(acc), String::new(), format_real(wall)])?;
        w.flush()?;
        accs.push(acc);
        walls.push(wall);
    }
    let (mean, se) = mean_and_stderr(&accs);
    let (wall, _) = mean_and_stderr(&walls);
    w.write_record([method.name().to_string(), "mean".into(), a.k.to_string(), format_real(mean), format_real(se), format_real(wall)])?;
    w.flush()?;
    Ok(())
}

pub fn cmd_sweep(a: &SweepArgs) -> CliResult<()> {
    if a.dims.is_empty() || a.seeds.is_empty() {
        return Err(CliError::Other("sweep needs at least one dim_z and one seed".into()));
    }
    let base = a.common.resolve()?;
    base.validate()?;
    let out = a.out.clone().unwrap_or_else(|| base.out_dir.join("sweep.csv"));
    let runs_dir = base.out_dir.join("sweep");
    fs::create_dir_all(&runs_dir)?;
    let header: Vec<&str> = REPORT_COLUMNS.iter().chain(&SUMMARY_COLUMNS).copied().collect();
    let mut w = create_csv(&out, &header)?;
    let mut failures = Vec::new();
    for &dim in &a.dims {
        let mut reports = Vec::new();
        for &seed in &a.seeds {
            let started = Instant::now();
            let mut cfg = base.clone();
            cfg.train.dim_z = dim;
            cfg.train.seed = seed;
            let stem = format!("dz{dim}_seed{seed}");
            let result = train_run(&cfg, &runs_dir.join(format!("{stem}.trace.csv")), a.quiet).and_then(|(ckpt, _)| {
                save_checkpoint(&ckpt, &runs_dir.join(format!("{stem}.vab")))?;
                eval_report(&ckpt, &cfg, started)
            });
            match result {
                Ok(r) => {
                    let mut fields = r.fields();
                    fields.extend(std::iter::repeat_n(String::new(), SUMMARY_COLUMNS.len()));
                    w.write_record(&fields)?;
                    w.flush()?;
                    if !a.quiet {
                        eprintln!("dim_z {dim} seed {seed}: acc {:.4} psnr {:.2} dB", r.acc, r.psnr_db);
                    }
                    reports.push(r);
                }
                Err(e) => {
                    eprintln!("dim_z {dim} seed {seed} failed: {e}");
                    failures.push(e);
                }
            }
        }
        if let Some(summary) = SweepSummary::from_runs(&reports) {
            w.write_record(summary.fields())?;
            w.flush()?;
        }
    }
    match failures.len() {
        0 => Ok(()),
        1 => Err(failures.remove(0)),
        n => Err(CliError::Other(format!("{n} sweep runs failed; first: {}", failures[0]))),
    }
}

pub fn cmd_encode(a: &EncodeArgs) -> CliResult<()> {
    let ckpt = open_checkpoint(&a.checkpoint)?;
    let images = load_images(&a.images, a.limit)?;
    let x = model_inputs(images, &ckpt.config)?;
    let codes = hard_codes(&ckpt.params, &x)?;
    let bytes = CodeFile::from_hard_codes(&codes)?.to_bytes()?;
    ensure_parent(&a.out)?;
    fs::write(&a.out, bytes)?;
    Ok(())
}

/// Reads only the checkpoint and the code file; pixels are never touched.
pub fn cmd_classify(a: &ClassifyArgs) -> CliResult<()> {
    let ckpt = open_checkpoint(&a.checkpoint)?;
    let bytes = fs::read(&a.codes).map_err(|e| CliError::CodeHeader(format!("{}: {e}", a.codes.display())))?;
    let file = CodeFile::from_bytes(&bytes).map_err(|e| match e {
        Error::BadMagic { .. } | Error::Truncated { .. } | Error::Format(_) => CliError::CodeHeader(e.to_string()),
        other => other.into(),
    })?;
    if file.dim_z != ckpt.config.dim_z {
        return Err(CliError::CodeHeader(format!(
            "header says dim_z = {} but the checkpoint has dim_z = {}",
            file.dim_z, ckpt.config.dim_z
        )));
    }
    let ids = if file.codes.is_empty() {
        Vec::new()
    } else {
        classify_codes(&ckpt.params.mixture, &file.to_tensor()?)?
    };
    let sink: Box<dyn Write> = match &a.out {
        Some(p) => {
            ensure_parent(p)?;
            Box::new(File::create(p)?)
        }
        None => Box::new(std::io::stdout()),
    };
    let mut out = BufWriter::new(sink);
    for id in ids {
        writeln!(out, "{id}")?;
    }
    out.flush()?;
    Ok(())
}
