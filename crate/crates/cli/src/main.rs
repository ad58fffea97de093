//! `partforge`: command-line driver for the part-based classifier pipeline.

mod config;
mod corpus;
mod stages;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::PipelineConfig;
use corpus::Split;

#[derive(Parser)]
#[command(
    name = "partforge",
    version,
    about = "Train part-based image classifiers from random parts"
)]
struct Cli {
    /// TOML configuration file; every key has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set joint.lambda_w=0.05`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-pattern corpus of PNG images and a manifest.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        noise: Option<f32>,
        #[arg(long)]
        train_per_class: Option<usize>,
        #[arg(long)]
        test_per_class: Option<usize>,
    },
    /// Build feature pyramids (and mirrored ones) for every corpus image.
    Featurize {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        features_dir: PathBuf,
    },
    /// Draw a pool of whitened random parts from the training images.
    InitParts {
        #[arg(long)]
        features_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pool_size: Option<usize>,
        #[arg(long)]
        keep_fraction: Option<f64>,
    },
    /// Keep a sparse subset of the pool by group-regularized training.
    SelectParts {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        target_m: Option<usize>,
        /// `auto` or comma-separated values.
        #[arg(long)]
        lambda_grid: Option<String>,
    },
    /// Jointly train part filters and part weights.
    TrainJoint {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda_w: Option<f64>,
        #[arg(long)]
        lambda_u: Option<f64>,
        #[arg(long)]
        rel_tol: Option<f64>,
        #[arg(long)]
        max_outer: Option<usize>,
        /// Accept an unselected pool (the random-parts baseline).
        #[arg(long)]
        skip_select: bool,
        /// Trace path; defaults to `<out stem>.trace.json`.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Do not write a model file after each outer iteration.
        #[arg(long)]
        no_checkpoints: bool,
    },
    /// Mean per-class accuracy and confusion matrix of a trained model.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features_dir: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Report path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Part weights as CSV and top part detections on test images as JSON.
    ExportViz {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features_dir: PathBuf,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn push<T: ToString>(overrides: &mut Vec<String>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        overrides.push(format!("{key}={}", v.to_string()));
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("PARTFORGE_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("PARTFORGE_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    init_threads()?;

    let mut overrides = cli.set.clone();
    push(&mut overrides, "seed", cli.seed);
    match &cli.command {
        Command::SynthData {
            noise,
            train_per_class,
            test_per_class,
            ..
        } => {
            push(&mut overrides, "synth.noise", *noise);
            push(&mut overrides, "synth.train_per_class", *train_per_class);
            push(&mut overrides, "synth.test_per_class", *test_per_class);
        }
        Command::InitParts {
            pool_size,
            keep_fraction,
            ..
        } => {
            push(&mut overrides, "partgen.pool_size", *pool_size);
            push(&mut overrides, "partgen.keep_fraction", *keep_fraction);
        }
        Command::SelectParts {
            target_m, lambda_grid, ..
        } => {
            push(&mut overrides, "select.target_m", *target_m);
            push(
                &mut overrides,
                "select.lambda_grid",
                lambda_grid.as_ref().map(|g| format!("{g:?}")),
            );
        }
        Command::TrainJoint {
            lambda_w,
            lambda_u,
            rel_tol,
            max_outer,
            ..
        } => {
            push(&mut overrides, "joint.lambda_w", *lambda_w);
            push(&mut overrides, "joint.lambda_u", *lambda_u);
            push(&mut overrides, "joint.rel_tol", *rel_tol);
            push(&mut overrides, "joint.outer_max_iters", *max_outer);
        }
        _ => {}
    }
    let cfg = PipelineConfig::load(cli.config.as_deref(), &overrides)?;
    let hash = cfg.hash();
    log::debug!("config hash {hash}");

    match &cli.command {
        Command::SynthData { out, .. } => stages::synth_data(&cfg, &hash, out),
        Command::Featurize { corpus, features_dir } => stages::featurize(&cfg, &hash, corpus, features_dir),
        Command::InitParts { features_dir, out, .. } => stages::init_parts(&cfg, &hash, features_dir, out),
        Command::SelectParts {
            model,
            features_dir,
            out,
            ..
        } => stages::select_parts(&cfg, &hash, model, features_dir, out),
        Command::TrainJoint {
            model,
            features_dir,
            out,
            skip_select,
            trace,
            no_checkpoints,
            ..
        } => stages::train_joint(
            &cfg,
            &hash,
            stages::JointArgs {
                model,
                features_dir,
                out,
                skip_select: *skip_select,
                trace: trace.as_deref(),
                checkpoints: !no_checkpoints,
            },
        ),
        Command::Evaluate {
            model,
            features_dir,
            split,
            out,
        } => stages::evaluate_model(&cfg, &hash, model, features_dir, *split, out.as_deref()).map(|_| ()),
        Command::ExportViz {
            model,
            features_dir,
            top_k,
            out_dir,
        } => stages::export_viz(&cfg, &hash, model, features_dir, *top_k, out_dir),
    }
}
