mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Worker thread count; defaults to all cores.
const THREADS_ENV: &str = "TETDIFF_THREADS";

#[derive(Parser)]
#[command(name = "tetdiff", version, about = "Diffusion models over deformable tetrahedral grids")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct GlobalArgs {
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override `section.key=value`, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Base seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Grid resolution (overrides `grid.resolution`).
    #[arg(long, global = true)]
    resolution: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit every OBJ mesh in a directory to a `.tetg` grid state.
    Fit {
        input: PathBuf,
        /// Output directory (default `paths.data`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the denoiser on a directory of `.tetg` states.
    Train {
        /// Dataset directory (default `paths.data`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to write (default `paths.checkpoint`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the optimizer state stored in the output checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Generate meshes from noise.
    Sample {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Sampler name (overrides `diffusion.sampler`).
        #[arg(long)]
        sampler: Option<String>,
        /// DDIM step count (overrides `diffusion.steps`).
        #[arg(long)]
        steps: Option<usize>,
        /// Directory for sampled x̂₀ snapshots of the first sample.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Complete a shape from a single rendered depth view.
    Complete {
        #[command(flatten)]
        model: ModelArgs,
        /// Mesh to observe.
        #[arg(long)]
        mesh: PathBuf,
        #[command(flatten)]
        camera: CameraArgs,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Decode a spherical path between the latents of two seeds.
    Interpolate {
        #[command(flatten)]
        model: ModelArgs,
        /// The two endpoint seeds.
        #[arg(long, num_args = 2, value_names = ["FROM", "TO"], required = true)]
        seeds: Vec<u64>,
        /// Number of meshes along the path, endpoints included.
        #[arg(long, default_value_t = 5)]
        steps: usize,
    },
    /// Compare a directory of generated OBJ meshes with a reference one.
    Eval {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Line-delimited JSON report file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract the mesh of a `.tetg` grid state.
    Export {
        input: PathBuf,
        /// Output OBJ (default: input with `.obj` extension).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Debug)]
pub struct ModelArgs {
    /// Checkpoint (default `paths.checkpoint`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory (default `paths.out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip component removal and smoothing.
    #[arg(long)]
    raw: bool,
}

#[derive(Args, Clone, Debug)]
pub struct CameraArgs {
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.0, 0.0, 3.0])]
    eye: Vec<f64>,
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.0, 0.0, 0.0])]
    target: Vec<f64>,
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.0, 1.0, 0.0])]
    up: Vec<f64>,
    /// Focal length in pixels.
    #[arg(long, default_value_t = 80.0)]
    focal: f64,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("{THREADS_ENV} must be a thread count, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    let g = &cli.global;
    let mut overrides = g.overrides.clone();
    if let Some(s) = g.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(r) = g.resolution {
        overrides.push(format!("grid.resolution={r}"));
    }
    if let Command::Sample { sampler, steps, .. } = &cli.command {
        if let Some(s) = sampler {
            overrides.push(format!("diffusion.sampler={s}"));
        }
        if let Some(s) = steps {
            overrides.push(format!("diffusion.steps={s}"));
        }
    }
    let cfg = config::parse_config(g.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Fit { input, out } => commands::fit(&cfg, &input, out),
        Command::Train { data, out, resume } => commands::train(&cfg, data, out, resume),
        Command::Sample {
            model,
            count,
            trajectory,
            ..
        } => commands::sample(&cfg, &model, count, trajectory),
        Command::Complete {
            model,
            mesh,
            camera,
            count,
        } => commands::complete(&cfg, &model, &mesh, &camera, count),
        Command::Interpolate { model, seeds, steps } => commands::interpolate(&cfg, &model, [seeds[0], seeds[1]], steps),
        Command::Eval { gen, reference, out } => commands::eval(&cfg, &gen, &reference, out),
        Command::Export { input, out } => commands::export(&cfg, &input, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
