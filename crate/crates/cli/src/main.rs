mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use amcn::losses::LossError;
use amcn::net::NetError;
use amcn::nn::NnError;
use amcn::train::TrainError;

use settings::UsageError;

#[derive(Parser)]
#[command(name = "amcn", version, about = "Precipitation downscaling with attention networks")]
pub struct Cli {
    /// key=value file supplying any option; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Upper bound on worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate synthetic scenes.
    Synth(SynthArgs),
    /// Screen and fill raw bands and derive the ancillary factors.
    Preprocess(PreprocessArgs),
    /// Train a model on a directory of scenes.
    Train(TrainArgs),
    /// Downscale a coarse precipitation raster.
    Downscale(DownscaleArgs),
    /// Correct a raster against station readings.
    Calibrate(CalibrateArgs),
    /// Score a raster against a truth raster, stations or its coarse input.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of the objective.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    stations: Option<usize>,
    #[arg(long)]
    station_bias: Option<f64>,
    #[arg(long)]
    station_noise: Option<f64>,
    /// Output directory, one subdirectory per scene.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PreprocessArgs {
    /// Raw band stack (dem, lstd, lstn, evi, nir, mir, swir2).
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Ancillary factor stack.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the screened and filled bands here.
    #[arg(long)]
    cleaned: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Directory of scene subdirectories as written by `synth`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_model: Option<PathBuf>,
    /// Loss history; defaults to the model path with `.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Network and schedule preset: desk, tiny or canonical.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    lr_halving_period: Option<usize>,
    /// per-patch or per-pixel.
    #[arg(long)]
    reduction: Option<String>,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    rdb_layers: Option<usize>,
    #[arg(long)]
    rdb_growth: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    no_gca: bool,
    #[arg(long)]
    no_mfca: bool,
    #[arg(long)]
    no_degradation_loss: bool,
}

#[derive(Args)]
pub struct DownscaleArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    lr_precip: Option<PathBuf>,
    #[arg(long)]
    ancillary: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CalibrateArgs {
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    stations: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Residual table; defaults to the output path with `.residuals.csv`.
    #[arg(long)]
    residuals: Option<PathBuf>,
    #[arg(long)]
    power: Option<f64>,
    #[arg(long)]
    max_neighbors: Option<usize>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    stations: Option<PathBuf>,
    /// Coarse input, for the degradation-consistency RMSE.
    #[arg(long)]
    lr_precip: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Network preset: tiny, desk or canonical.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    no_gca: bool,
    #[arg(long)]
    no_mfca: bool,
    #[arg(long)]
    no_degradation_loss: bool,
    /// Corrupts the convolution weight gradients, to exercise the failure path.
    #[arg(long, hide = true)]
    inject_fault: bool,
    /// Report file.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Gradient check exceeded its tolerance; exits with code 4.
#[derive(Debug)]
pub struct GradcheckFailed(pub String);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed: {}", self.0)
    }
}

impl std::error::Error for GradcheckFailed {}

fn numeric_nn(e: &NnError) -> bool {
    matches!(e, NnError::NonFinite { .. })
}

fn numeric_net(e: &NetError) -> bool {
    matches!(e, NetError::Nn(n) if numeric_nn(n))
}

fn numeric_loss(e: &LossError) -> bool {
    match e {
        LossError::NonPositive { .. } => true,
        LossError::Nn(n) => numeric_nn(n),
    }
}

fn is_numeric(e: &(dyn std::error::Error + 'static)) -> bool {
    if e.is::<GradcheckFailed>() {
        return true;
    }
    if let Some(t) = e.downcast_ref::<TrainError>() {
        return match t {
            TrainError::NonFinite { .. } => true,
            TrainError::Net(n) => numeric_net(n),
            TrainError::Nn(n) => numeric_nn(n),
            TrainError::Loss(l) => numeric_loss(l),
            _ => false,
        };
    }
    if let Some(n) = e.downcast_ref::<NetError>() {
        return numeric_net(n);
    }
    if let Some(n) = e.downcast_ref::<NnError>() {
        return numeric_nn(n);
    }
    false
}

/// 2 usage, 3 data or format, 4 numeric failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        2
    } else if err.chain().any(is_numeric) {
        4
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error code=2 kind=usage message={:?}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let kind = match code {
                2 => "usage",
                4 => "numeric",
                _ => "data",
            };
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error code={code} kind={kind} message={msg:?}");
            ExitCode::from(code)
        }
    }
}
