use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod output;

#[derive(Debug, Parser)]
#[command(name = "edgegrasp", version, about = "Edge-side image compression and cloud-side grasp detection")]
struct Cli {
    /// Directory for JSON results.
    #[arg(long, global = true, env = "EDGEGRASP_OUT", default_value = "edgegrasp-out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the encoder/decoder pair adversarially.
    TrainCodec(TrainCodecArgs),
    /// Train the two-stage grasp detector.
    TrainDetector(TrainDetectorArgs),
    /// Compress one PNG into a latent frame.
    Encode(EncodeArgs),
    /// Reconstruct a PNG from a latent frame.
    Decode(DecodeArgs),
    /// Score original/reconstructed image pairs.
    EvalQuality(EvalQualityArgs),
    /// Run the detector on one PNG.
    Detect(DetectArgs),
    /// Decode latents and detect grasps for remote clients.
    Serve(ServeArgs),
    /// Send one image to a running server.
    Request(RequestArgs),
    /// Tabulate latent sizes and compression ratios.
    Bench(BenchArgs),
    /// Compare reconstructions by the paired decoder and by a foreign one.
    MismatchDemo(MismatchArgs),
}

#[derive(Debug, Args)]
struct CodecShapeArgs {
    #[arg(long, default_value_t = 8)]
    latent_channels: usize,
    #[arg(long, default_value_t = 0)]
    extra_downsample: usize,
    #[arg(long, default_value_t = 3)]
    residual_blocks: usize,
    #[arg(long, default_value_t = 16)]
    feature_channels: usize,
}

#[derive(Debug, Args)]
struct TrainCodecArgs {
    /// Directory of training PNGs.
    #[arg(long, conflicts_with = "synthetic")]
    images: Option<PathBuf>,
    /// Generate this many synthetic training images instead.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Directory of validation PNGs.
    #[arg(long, conflicts_with = "val_synthetic")]
    val_images: Option<PathBuf>,
    /// Synthetic validation images, used when no directory is given.
    #[arg(long, default_value_t = 10)]
    val_synthetic: usize,
    #[command(flatten)]
    shape: CodecShapeArgs,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f32,
    #[arg(long, default_value_t = 30)]
    batch_size: usize,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, default_value_t = 50)]
    log_every: usize,
    #[arg(long, default_value_t = 0.01)]
    lambda_adv: f32,
    #[arg(long, default_value_t = 0.84)]
    alpha_mix: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint to write.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Debug, Args)]
struct TrainDetectorArgs {
    /// Dataset index JSON.
    #[arg(long, conflicts_with = "synthetic")]
    dataset: Option<PathBuf>,
    /// Generate this many synthetic scenes instead.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 120)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint to write.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Frame file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    frame: PathBuf,
    /// PNG to write.
    #[arg(long)]
    out: PathBuf,
    /// Original image; adds PSNR and SSIM to the result.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalQualityArgs {
    /// Directory holding `original/` and `reconstructed/` PNGs with matching names.
    #[arg(long)]
    pairs: PathBuf,
    /// JSON to write; defaults to `eval_quality.json` in the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a CSV table next to the JSON.
    #[arg(long)]
    csv: bool,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[arg(long)]
    detector: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Pass the image through this codec first, as the server would see it.
    #[arg(long)]
    codec: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    bind: String,
    /// Codec checkpoint; only its decoder runs.
    #[arg(long)]
    codec: PathBuf,
    #[arg(long)]
    detector: PathBuf,
    #[arg(long, default_value_t = 16 << 20)]
    max_frame_bytes: usize,
    #[arg(long, default_value_t = 10.0)]
    timeout_secs: f64,
}

#[derive(Debug, Args)]
struct RequestArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    server: String,
    /// Codec checkpoint; only its encoder runs.
    #[arg(long)]
    codec: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    timeout_secs: f64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Latent sizes and ratios for 16, 8, 4 and 2 latent channels.
    #[arg(long, required = true)]
    ratio_grid: bool,
}

#[derive(Debug, Args)]
struct MismatchArgs {
    /// Trained codec whose encoder produces the latents.
    #[arg(long)]
    codec: PathBuf,
    /// Foreign codec checkpoint; defaults to a fresh initialization.
    #[arg(long)]
    foreign: Option<PathBuf>,
    /// Seed of the fresh foreign initialization.
    #[arg(long, default_value_t = 12345)]
    foreign_seed: u64,
    /// Directory of held-out PNGs.
    #[arg(long, conflicts_with = "synthetic")]
    images: Option<PathBuf>,
    /// Synthetic held-out images, used when no directory is given.
    #[arg(long, default_value_t = 10)]
    synthetic: usize,
    #[arg(long, default_value_t = 99)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("edgegrasp: {e:#}");
            ExitCode::FAILURE
        }
    }
}
