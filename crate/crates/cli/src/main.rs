//! `shadowformer`: synthesize data, train, evaluate, run inference, run the
//! ablation matrix and render bottleneck attention maps.

mod commands;
mod config;
mod inference;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shadowformer_core::datasets::Layout;
use shadowformer_core::metrics::{Resolution, RmseConvention};

use crate::config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "shadowformer", version, about = "Mask-guided shadow removal on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic shadow dataset in the ISTD directory layout.
    Synth(SynthArgs),
    /// Train a model and write checkpoints plus a loss CSV.
    Train(TrainArgs),
    /// Run a checkpoint over the test split (or score existing results).
    Eval(EvalArgs),
    /// Remove the shadow from a single image.
    Infer(InferArgs),
    /// Train and evaluate the four architecture variants on one budget.
    Ablate(AblateArgs),
    /// Render bottleneck attention rows for chosen key points.
    VizAttn(VizArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Number of training triplets.
    #[arg(long)]
    n: usize,
    /// Number of held-out test triplets.
    #[arg(long, default_value_t = 0)]
    test_n: usize,
    /// Side length of the square images.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output root; `train_A/B/C` and `test_A/B/C` are created under it.
    #[arg(long)]
    out: PathBuf,
    /// Penumbra width in pixels (0 = hard shadow edges).
    #[arg(long, default_value_t = 0)]
    feather: usize,
    /// Relative per-channel illumination jitter between the two captures.
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
}

#[derive(Debug, Args, Clone, Default)]
struct CommonArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (or file, for `infer`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dataset_root: Option<PathBuf>,
    /// istd, istd_plus, srd or synthetic.
    #[arg(long)]
    layout: Option<Layout>,
    /// Model preset: toy, small or large.
    #[arg(long)]
    variant: Option<String>,
    /// `original` or a square side length such as 256.
    #[arg(long)]
    resolution: Option<Resolution>,
    /// LAB error convention.
    #[arg(long, value_parser = ["mae", "rms"])]
    rmse_mode: Option<String>,
    /// Same-region damping strength of the bottleneck attention.
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Debug, Args, Clone, Default)]
struct OptimArgs {
    /// Total optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Side of the random training crops.
    #[arg(long)]
    crop_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Save a checkpoint every this many steps (0 = only the final one).
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to run over the test split.
    #[arg(long, conflicts_with = "results", required_unless_present = "results")]
    checkpoint: Option<PathBuf>,
    /// Directory of existing result images, named by test stem.
    #[arg(long)]
    results: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    mask: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Subset of variants to run, e.g. `2` or `1,3`.
    #[arg(long, value_delimiter = ',', value_parser = clap::value_parser!(u8).range(1..=4))]
    variants: Vec<u8>,
}

#[derive(Debug, Args)]
struct VizArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Key point as `row,col` in input pixels; repeatable.
    #[arg(long = "point", required = true, value_parser = parse_point)]
    points: Vec<(usize, usize)>,
}

fn parse_point(s: &str) -> Result<(usize, usize), String> {
    let (y, x) = s.split_once(',').ok_or_else(|| format!("expected `row,col`, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(y)?, parse(x)?))
}

impl CommonArgs {
    fn overrides(&self, optim: Option<&OptimArgs>) -> anyhow::Result<Overrides> {
        let optim = optim.cloned().unwrap_or_default();
        Ok(Overrides {
            seed: self.seed,
            variant: self.variant.clone(),
            out: self.out.clone(),
            dataset_root: self.dataset_root.clone(),
            layout: self.layout,
            resolution: self.resolution,
            rmse_mode: self.rmse_mode.as_deref().map(str::parse::<RmseConvention>).transpose()?,
            sigma: self.sigma,
            steps: optim.steps,
            batch_size: optim.batch_size,
            crop_size: optim.crop_size,
            lr: optim.lr,
            checkpoint_every: optim.checkpoint_every,
        })
    }

    fn resolve(&self, optim: Option<&OptimArgs>) -> anyhow::Result<config::RunConfig> {
        let file = match &self.config {
            Some(p) => config::FileConfig::load(p)?,
            None => config::FileConfig::default(),
        };
        config::RunConfig::resolve(file, &self.overrides(optim)?)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => commands::synth(&commands::SynthOptions {
            train: a.n,
            test: a.test_n,
            size: a.size,
            seed: a.seed,
            out: a.out,
            feather: a.feather,
            jitter: a.jitter,
        }),
        Command::Train(a) => commands::train(&a.common.resolve(Some(&a.optim))?),
        Command::Eval(a) => commands::eval(&a.common.resolve(None)?, a.checkpoint.as_deref(), a.results.as_deref()),
        Command::Infer(a) => commands::infer(&a.common.resolve(None)?, &a.checkpoint, &a.input, &a.mask),
        Command::Ablate(a) => commands::ablate(&a.common.resolve(Some(&a.optim))?, &a.variants),
        Command::VizAttn(a) => commands::viz_attn(&a.common.resolve(None)?, &a.checkpoint, &a.input, &a.mask, &a.points),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
