mod commands;
mod run;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pdvseg::networks::NetKind;
use serde::Serialize;

/// Lobe segmentation workflow: synthetic data, training, evaluation and
/// agreement statistics.
#[derive(Parser)]
#[command(name = "pdvseg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset with a manifest
    GenPhantoms(GenPhantomsArgs),
    /// Train a network on a manifest
    Train(TrainArgs),
    /// Score a checkpoint (or saved predictions) against ground truth
    Eval(EvalArgs),
    /// Volume agreement (Bland-Altman, Pearson) and robustness ANOVA
    Agreement(AgreementArgs),
    /// Render evaluation and agreement outputs as a markdown report
    Report(ReportArgs),
}

#[derive(Args, Serialize)]
pub struct GenPhantomsArgs {
    /// Number of cases to generate
    #[arg(long)]
    pub count: usize,
    /// Grid size as NXxNYxNZ; every dimension must be divisible by 8
    #[arg(long, default_value = "64x64x32", value_parser = parse_shape)]
    pub shape: [usize; 3],
    /// Dataset seed; case i uses a stream derived from it
    #[arg(long, env = "PDVSEG_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Output directory for volumes, masks and manifest.json
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of each fissure that is visible
    #[arg(long, default_value_t = 0.7)]
    pub completeness: f64,
    /// Standard deviation of the additive intensity noise (HU)
    #[arg(long, default_value_t = 20.0)]
    pub noise_sd: f64,
    /// Number of pathology blobs per case
    #[arg(long, default_value_t = 2)]
    pub blobs: usize,
}

#[derive(Args, Serialize)]
pub struct TrainArgs {
    /// Network kind: pdvnet, dvnet or unet2d
    #[arg(long, value_parser = parse_kind)]
    pub model: NetKind,
    /// Training config JSON; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset manifest
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory (overrides the config)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for initialisation, shuffling and dropout
    #[arg(long, env = "PDVSEG_SEED")]
    pub seed: Option<u64>,
    /// Number of training epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Volumes (3D) or slices (2D) per batch
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Spatial dropout rate inside the dense blocks
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Target grid NXxNYxNZ when no config is given
    #[arg(long, value_parser = parse_shape)]
    pub shape: Option<[usize; 3]>,
}

#[derive(Args, Serialize)]
pub struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long, required_unless_present = "predictions_dir", conflicts_with = "predictions_dir")]
    pub checkpoint: Option<PathBuf>,
    /// Score label maps stored here (named like the truth masks) instead
    #[arg(long)]
    pub predictions_dir: Option<PathBuf>,
    /// Fail unless the checkpoint holds this network kind
    #[arg(long, value_parser = parse_kind)]
    pub model: Option<NetKind>,
    /// Dataset manifest with the truth masks
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for cases.csv, summary.csv and report.json
    #[arg(long)]
    pub out: PathBuf,
    /// Also write predicted masks here, named like the truth masks
    #[arg(long)]
    pub save_predictions: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct AgreementArgs {
    /// Dataset manifest with the truth masks and acquisition metadata
    #[arg(long)]
    pub data: PathBuf,
    /// Predicted masks named like the truth masks
    #[arg(long, required_unless_present = "checkpoint", conflicts_with = "checkpoint")]
    pub predictions_dir: Option<PathBuf>,
    /// Predict on the fly with this checkpoint
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory for the agreement tables
    #[arg(long)]
    pub out: PathBuf,
    /// Also write Bland-Altman scatter plots as SVG
    #[arg(long)]
    pub svg: bool,
}

#[derive(Args, Serialize)]
pub struct ReportArgs {
    /// Output directory of `eval`
    #[arg(long)]
    pub eval: PathBuf,
    /// Output directory of `agreement`
    #[arg(long)]
    pub agreement: Option<PathBuf>,
    /// Output directory for report.md
    #[arg(long)]
    pub out: PathBuf,
}

/// Invalid user input detected after argument parsing; exits with code 2
/// like clap's own usage errors.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    if parts.len() != 3 {
        return Err(format!("expected NXxNYxNZ, got '{s}'"));
    }
    let mut out = [0usize; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| format!("'{p}' is not a positive integer"))?;
        if *o == 0 {
            return Err("dimensions must be positive".into());
        }
    }
    Ok(out)
}

fn parse_kind(s: &str) -> Result<NetKind, String> {
    s.parse().map_err(|e: pdvseg::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenPhantoms(a) => commands::gen_phantoms(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Agreement(a) => commands::agreement(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_parsing() {
        assert_eq!(parse_shape("64x64x32").unwrap(), [64, 64, 32]);
        assert!(parse_shape("64x64").is_err());
        assert!(parse_shape("0x8x8").is_err());
        assert!(parse_shape("ax8x8").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
