//! Command-line front end: one JSON config drives every stage, flags
//! override it per run.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use microrecon::losses::DescriptorKind;
use microrecon::reconstructor::BinarizeMode;
use microrecon::trainer::TrainMode;
use serde::de::DeserializeOwned;

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "microrecon", version, about = "3D porous microstructure reconstruction from one 2D image")]
pub struct Cli {
    /// JSON run config; all defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for training, reconstruction and annealing.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

/// Reference image override shared by the stages that read one.
#[derive(Debug, Args)]
pub struct ImageArg {
    /// Isotropic reference image (binary PGM); replaces the config input.
    #[arg(long)]
    pub image: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Porosity, S₂, correlation length and recommended network of the reference.
    Analyze {
        #[command(flatten)]
        image: ImageArg,
        #[arg(long)]
        max_lag: Option<usize>,
    },
    /// Resolve the network size from the reference or an explicit depth.
    Design {
        #[command(flatten)]
        image: ImageArg,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        m_cap: Option<usize>,
    },
    /// Train a model on the reference.
    Train {
        #[command(flatten)]
        image: ImageArg,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// `basic` or `improved`.
        #[arg(long, value_parser = parse_enum::<TrainMode>)]
        mode: Option<TrainMode>,
        /// `gram` or `acf`.
        #[arg(long, value_parser = parse_enum::<DescriptorKind>)]
        descriptor: Option<DescriptorKind>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Generate a binary volume from a trained model.
    Reconstruct {
        /// Model file; `<out>/model.mm01` when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output dims as `LxHxW`.
        #[arg(long, value_parser = parse_dims)]
        dims: Option<[usize; 3]>,
        /// Tile dims as `LxHxW`.
        #[arg(long, value_parser = parse_dims)]
        sub_block: Option<[usize; 3]>,
        #[arg(long)]
        porosity: Option<f64>,
        /// `quantile` or `otsu`.
        #[arg(long, value_parser = parse_enum::<BinarizeMode>)]
        binarize: Option<BinarizeMode>,
    },
    /// Compare volumes against the reference image and an optional ground truth.
    Evaluate {
        #[command(flatten)]
        image: ImageArg,
        /// Volume to evaluate; repeatable. `<out>/recon.mv01` when absent.
        #[arg(long = "volume")]
        volumes: Vec<PathBuf>,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long)]
        max_lag: Option<usize>,
    },
    /// Simulated-annealing baseline reconstruction.
    Sa {
        #[command(flatten)]
        image: ImageArg,
        #[arg(long)]
        max_swaps: Option<usize>,
        /// Target dims as `LxHxW`; `L = 1` anneals an image.
        #[arg(long, value_parser = parse_dims)]
        dims: Option<[usize; 3]>,
    },
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| e.to_string())
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s.split('x').map(str::parse).collect::<Result<_, _>>().map_err(|e| format!("{s}: {e}"))?;
    parts.try_into().map_err(|_| format!("expected LxHxW, got {s}"))
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Load the config, apply flag overrides, validate, and run the command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if cli.out.is_some() {
        cfg.output = cli.out.clone();
    }
    let image = |cfg: &mut RunConfig, arg: ImageArg| {
        if let Some(p) = arg.image {
            cfg.input.reference = Some(p);
            cfg.input.references = None;
        }
    };
    match cli.command {
        Command::Analyze { image: i, max_lag } => {
            image(&mut cfg, i);
            cfg.design.max_lag = max_lag.or(cfg.design.max_lag);
            cfg.validate()?;
            commands::cmd_analyze(cfg).map(drop)
        }
        Command::Design { image: i, m, n, m_cap } => {
            image(&mut cfg, i);
            cfg.design.m = m.or(cfg.design.m);
            set(&mut cfg.design.n, n);
            set(&mut cfg.design.m_cap, m_cap);
            cfg.validate()?;
            commands::cmd_design(cfg).map(drop)
        }
        Command::Train { image: i, m, n, iterations, batch_size, mode, descriptor, lr } => {
            image(&mut cfg, i);
            cfg.design.m = m.or(cfg.design.m);
            set(&mut cfg.design.n, n);
            set(&mut cfg.train.iterations, iterations);
            set(&mut cfg.train.batch_size, batch_size);
            set(&mut cfg.train.mode, mode);
            set(&mut cfg.train.descriptor, descriptor);
            set(&mut cfg.train.adam.lr, lr);
            cfg.validate()?;
            commands::cmd_train(cfg).map(drop)
        }
        Command::Reconstruct { model, dims, sub_block, porosity, binarize } => {
            set(&mut cfg.reconstruct.dims, dims);
            cfg.reconstruct.sub_block = sub_block.or(cfg.reconstruct.sub_block);
            cfg.reconstruct.porosity = porosity.or(cfg.reconstruct.porosity);
            set(&mut cfg.reconstruct.binarize, binarize);
            cfg.validate()?;
            commands::cmd_reconstruct(cfg, model).map(drop)
        }
        Command::Evaluate { image: i, volumes, ground_truth, max_lag } => {
            image(&mut cfg, i);
            set(&mut cfg.evaluate.max_lag, max_lag);
            cfg.validate()?;
            commands::cmd_evaluate(cfg, volumes, ground_truth).map(drop)
        }
        Command::Sa { image: i, max_swaps, dims } => {
            image(&mut cfg, i);
            set(&mut cfg.sa.max_swaps, max_swaps);
            cfg.sa.dims = dims.or(cfg.sa.dims);
            cfg.validate()?;
            commands::cmd_sa(cfg).map(drop)
        }
    }
}
