//! `hcanet` command line: synth, train, eval, predict, visualize.
//!
//! Exit codes: 0 success, 2 usage error, 1 runtime error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::{read_config, render_config};
use crate::data::{
    generate_synthetic, load_dataset, prepare_batch, read_keypoints_csv, split_by_subject,
    write_dataset, SpineSample, SynthConfig, NUM_DISCS,
};
use crate::error::HcaError;
use crate::eval::{aggregate, score_sample, DEFAULT_THRESHOLD};
use crate::network::{Model, DOWNSAMPLE};
use crate::predict::{load_image, predict_image, render_overlay, save_overlay, write_coords_csv};
use crate::trainer::{Trainer, TrainReport};

#[derive(Debug, Parser)]
#[command(name = "hcanet", version, about = "Intervertebral disc labeling toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Predict disc coordinates for one image.
    Predict(PredictArgs),
    /// Same outputs as predict; the overlay is the point.
    Visualize(PredictArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub count: u64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub distractors: usize,
    #[arg(long)]
    pub noise: Option<f64>,
    /// `default` (256x256) or `tiny` (64x64).
    #[arg(long, default_value = "default")]
    pub preset: String,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint up to the configured epoch count.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Ground truth `.keypoints.csv` drawn in green.
    #[arg(long)]
    pub keypoints: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(HcaError),
}

impl From<HcaError> for CliError {
    fn from(e: HcaError) -> Self {
        CliError::Runtime(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

type CliResult = std::result::Result<(), CliError>;

/// Parses `args` (including the program name), runs, and returns the exit
/// code. Results go to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    2
                }
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(&a, out),
        Command::Train(a) => train(&a, out),
        Command::Eval(a) => eval(&a, out),
        Command::Predict(a) | Command::Visualize(a) => predict(&a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.exit_code()
        }
    }
}

fn synth(a: &SynthArgs, out: &mut dyn Write) -> CliResult {
    let base = match a.preset.as_str() {
        "default" => SynthConfig::default(),
        "tiny" => SynthConfig::tiny(),
        other => {
            return Err(CliError::Usage(format!(
                "unknown preset {other:?} (expected default|tiny)"
            )))
        }
    };
    let cfg = SynthConfig {
        count: a.count as usize,
        seed: a.seed,
        distractor_count: a.distractors,
        noise_std: a.noise.unwrap_or(base.noise_std),
        ..base
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if !a.force && is_non_empty_dir(&a.out) {
        return Err(CliError::Runtime(HcaError::Config(format!(
            "{} exists and is not empty; pass --force to overwrite",
            a.out.display()
        ))));
    }
    let samples = generate_synthetic(&cfg)?;
    write_dataset(&a.out, &samples)?;
    let _ = writeln!(out, "wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn is_non_empty_dir(p: &Path) -> bool {
    std::fs::read_dir(p).is_ok_and(|mut d| d.next().is_some())
}

fn train(a: &TrainArgs, out: &mut dyn Write) -> CliResult {
    let cfg = match read_config(&a.config) {
        Ok(c) => c,
        Err(e @ HcaError::Io { .. }) => return Err(e.into()),
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    let samples = load_dataset(&a.data)?;
    let (mut train_set, mut val_set) = split_by_subject(samples);
    if train_set.is_empty() {
        train_set = std::mem::take(&mut val_set);
    }
    let mut trainer = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.config.model != cfg.model {
                return Err(HcaError::Config(format!(
                    "checkpoint {} was trained with a different model configuration",
                    p.display()
                ))
                .into());
            }
            Trainer::from_checkpoint(ckpt)?
        }
        None => Trainer::new(cfg.clone())?,
    };
    let c = trainer.config();
    let _ = writeln!(
        out,
        "hcanet train: lambda_sk={} beta={} alpha={} lr={} epochs={} batch_size={} \
         train={} val={} params={}",
        c.loss.lambda_sk,
        c.loss.beta,
        c.loss.alpha,
        c.learning_rate,
        cfg.epochs,
        c.batch_size,
        train_set.len(),
        val_set.len(),
        trainer.model().parameter_count()
    );
    for line in render_config(c).lines() {
        let _ = writeln!(out, "  {line}");
    }
    let report: TrainReport = trainer.run(&train_set, &val_set, &a.out, cfg.epochs)?;
    if let Some(last) = report.last() {
        let dtt = last.val_dtt_px.map_or("nan".into(), |d| format!("{d:.4}"));
        let _ = writeln!(
            out,
            "final: epoch={} train_loss={:.6} val_loss={:.6} val_dtt_px={} val_fnr={:.2} val_fpr={:.2}",
            last.epoch, last.train_loss, last.val_loss, dtt, last.val_fnr, last.val_fpr
        );
    } else {
        let _ = writeln!(out, "final: no epochs run (checkpoint already at {} epochs)", trainer.epoch());
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Model, HcaError> {
    let ckpt = Checkpoint::load(path)?;
    Model::from_parts(&ckpt.config.model, ckpt.params)
}

/// Scores `model` on `samples` with ground truth in resized-image pixels.
pub fn evaluate_samples(
    model: &Model,
    samples: &[SpineSample],
    threshold: f64,
) -> Result<crate::eval::MetricsReport, HcaError> {
    if model.config().num_discs != NUM_DISCS {
        return Err(HcaError::Runtime(format!(
            "model predicts {} discs, data carries {NUM_DISCS}",
            model.config().num_discs
        )));
    }
    let mut records = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(8) {
        let refs: Vec<&SpineSample> = chunk.iter().collect();
        let batch = prepare_batch(&refs, model.config(), 1.0)?;
        let outs = model.predict_batch(&batch.images)?;
        for (o, kp) in outs.iter().zip(&batch.keypoints) {
            records.push(score_sample(&o.fused, kp, threshold, DOWNSAMPLE as f64)?);
        }
    }
    aggregate(&records, threshold)
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult {
    if !(a.threshold >= 0.0) {
        return Err(CliError::Usage(format!("threshold must be >= 0, got {}", a.threshold)));
    }
    let model = load_model(&a.checkpoint)?;
    let samples = load_dataset(&a.data)?;
    if samples.is_empty() {
        return Err(HcaError::InputDomain(format!("no samples in {}", a.data.display())).into());
    }
    let report = evaluate_samples(&model, &samples, a.threshold)?;
    std::fs::write(&a.report, report.to_json() + "\n").map_err(|e| HcaError::io(&a.report, e))?;
    let _ = write!(out, "{}", report.table("HCA-Net"));
    Ok(())
}

fn predict(a: &PredictArgs, out: &mut dyn Write) -> CliResult {
    if !(a.threshold >= 0.0) {
        return Err(CliError::Usage(format!("threshold must be >= 0, got {}", a.threshold)));
    }
    let model = load_model(&a.checkpoint)?;
    let (image, spacing) = load_image(&a.image)?;
    let truth = a
        .keypoints
        .as_ref()
        .map(|p| read_keypoints_csv(p, spacing))
        .transpose()?;
    let rows = predict_image(&model, &image, a.threshold)?;
    let prefix = a.out.to_string_lossy();
    let coords = PathBuf::from(format!("{prefix}.coords.csv"));
    let overlay = PathBuf::from(format!("{prefix}.overlay.png"));
    write_coords_csv(&coords, &rows)?;
    save_overlay(&overlay, &render_overlay(&image, &rows, truth.as_ref()))?;
    let _ = writeln!(
        out,
        "{} of {} discs detected; wrote {} and {}",
        rows.iter().filter(|r| r.visible == 1).count(),
        rows.len(),
        coords.display(),
        overlay.display()
    );
    Ok(())
}
