mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Failure;

#[derive(Parser)]
#[command(name = "tonescope", version, about = "Explorable learned HDR tone mapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct LatentArgs {
    /// Latent code as comma-separated floats.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "z_seed")]
    pub z: Option<String>,
    /// Draw the latent code from the standard normal prior with this seed.
    #[arg(long)]
    pub z_seed: Option<u64>,
    #[arg(long)]
    pub gamma_base: Option<f64>,
    #[arg(long)]
    pub gamma_post: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Tone-map one HDR image to an 8-bit PNG.
    Tonemap {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "TONESCOPE_WEIGHTS")]
        weights: Option<PathBuf>,
        #[command(flatten)]
        latent: LatentArgs,
        /// Encode the output with the sRGB transfer curve.
        #[arg(long)]
        srgb: bool,
    },
    /// Train a model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the checkpoint in the configured output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Print "Q S N" for an HDR/LDR pair.
    Tmqi {
        #[arg(long)]
        hdr: PathBuf,
        #[arg(long)]
        ldr: PathBuf,
    },
    /// Latent search from several random starts; writes previews and a report.
    Explore {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 4)]
        starts: usize,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, env = "TONESCOPE_WEIGHTS")]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Downscale the input so its long edge is at most this many pixels.
        #[arg(long, default_value_t = 512)]
        max_edge: usize,
    },
    /// Rank classical operators per HDR image and keep the top k as targets.
    Dataset {
        #[arg(long)]
        hdr_dir: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Defaults to `<hdr-dir>/dataset`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = "TONESCOPE_WEIGHTS")]
        weights: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = tonescope_client::api::DEFAULT_PORT)]
        port: u16,
    },
    /// Drive a running service.
    Remote {
        #[arg(long, default_value = "http://127.0.0.1:7734")]
        url: String,
        #[command(subcommand)]
        command: RemoteCommand,
    },
}

#[derive(Subcommand)]
pub enum RemoteCommand {
    Health,
    /// Upload, render one code and save the preview.
    Render {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        latent: LatentArgs,
    },
    /// Upload and run the latent search.
    Optimize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 4)]
        starts: usize,
        #[arg(long, default_value_t = 30)]
        iters: usize,
        /// Save candidate previews here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Tonemap {
            input,
            out,
            weights,
            latent,
            srgb,
        } => commands::tonemap(&input, &out, weights.as_deref(), &latent, srgb),
        Command::Train { config, resume } => commands::train(&config, resume),
        Command::Tmqi { hdr, ldr } => commands::tmqi(&hdr, &ldr),
        Command::Explore {
            input,
            starts,
            out_dir,
            weights,
            iters,
            seed,
            max_edge,
        } => commands::explore(&input, starts, &out_dir, weights.as_deref(), iters, seed, max_edge),
        Command::Dataset { hdr_dir, k, out_dir } => commands::dataset(&hdr_dir, k, out_dir),
        Command::Serve { weights, host, port } => commands::serve(weights.as_deref(), &host, port),
        Command::Remote { url, command } => commands::remote(&url, command),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
