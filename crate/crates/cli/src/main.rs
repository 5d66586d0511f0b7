//! `koopman` — experiment orchestration for the Koopman embedding toolkit.
//!
//! `run` executes a full pipeline (collect → train → [refine] → control →
//! analyze) described by a config file or a preset; the remaining
//! subcommands wrap single stages around saved artifacts.
//!
//! Exit codes: 2 config/validation errors, 3 I/O errors, 4 numerical
//! failures.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use koopman_cli::config::ExperimentConfig;
use koopman_cli::pipeline::{self, RunPaths, Stage};
use koopman_cli::{artifacts, presets};

#[derive(Parser)]
#[command(name = "koopman", version, about = "Koopman embedding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config (TOML or JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (defaults to the config's `output`, then `.`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full experiment pipeline from a config file or a preset.
    Run {
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// One of: motivating, pendulum, cartpole.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides every seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Run a single stage, loading earlier artifacts from the output dir.
        #[arg(long)]
        stage: Option<Stage>,
    },
    /// Collect a trajectory dataset (writes dataset.csv).
    Simulate(ConfigArgs),
    /// Fit or train a model from a dataset (writes model.json, loss.csv).
    Train {
        #[command(flatten)]
        common: ConfigArgs,
        /// Dataset CSV (defaults to <out>/dataset.csv).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Refine a trained model with closed-loop data (writes model_refined.json).
    Refine {
        #[command(flatten)]
        common: ConfigArgs,
        /// Initial model JSON (defaults to <out>/model.json).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Step-1 dataset CSV (defaults to <out>/dataset.csv).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Design the LQR gain and simulate the true closed loop.
    Control(ModelArgs),
    /// Evaluate the modeling-error field over a grid (writes heatmap.csv).
    Heatmap(ModelArgs),
    /// Estimate the basin of attraction of the closed loop (writes basin.csv).
    Basin(ModelArgs),
    /// Estimate the analytic error bound terms (writes bound.json).
    Bound(ModelArgs),
    /// Open-loop state prediction against the true rollout (writes prediction.csv).
    Predict(ModelArgs),
}

#[derive(clap::Args)]
struct ModelArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Model JSON (defaults to <out>/model.json).
    #[arg(long)]
    model: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(err) = run(Cli::parse()) {
        eprintln!("error: {err:#}");
        std::process::exit(classify(&err));
    }
}

fn classify(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<koopman_core::Error>().is_some() {
            return 4;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    2
}

fn load_config(args: &ConfigArgs) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.override_seed(seed);
    }
    config.validate()?;
    let out = args
        .out
        .clone()
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok((config, out))
}

fn model_path(paths: &RunPaths, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| paths.model())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            config,
            preset,
            out,
            seed,
            stage,
        } => {
            let out = out.unwrap_or_else(|| PathBuf::from("."));
            match (config, preset) {
                (Some(path), None) => {
                    let mut cfg = ExperimentConfig::load(&path)?;
                    if let Some(seed) = seed {
                        cfg.override_seed(seed);
                    }
                    let dir = cfg.output.clone().unwrap_or(out);
                    pipeline::run_pipeline(&cfg, &dir, stage)
                }
                (None, Some(name)) => {
                    for (label, mut cfg) in presets::preset(&name)? {
                        if let Some(seed) = seed {
                            cfg.override_seed(seed);
                        }
                        let dir = out.join(&label);
                        log::info!("preset {name}: running `{label}` into {}", dir.display());
                        pipeline::run_pipeline(&cfg, &dir, stage)?;
                    }
                    Ok(())
                }
                _ => bail!("run needs exactly one of --config or --preset"),
            }
        }
        Command::Simulate(args) => {
            let (config, out) = load_config(&args)?;
            let paths = RunPaths::new(&out);
            let system = config.build_system()?;
            let cfg = config.integration()?;
            let ds = pipeline::collect_stage(&config, &system, &cfg, config.sampling.x0_seed)?;
            artifacts::write_dataset_csv(&paths.dataset(), &ds, &config.hash())?;
            println!("wrote {} ({} triplets)", paths.dataset().display(), ds.len());
            Ok(())
        }
        Command::Train { common, dataset } => {
            let (config, out) = load_config(&common)?;
            let paths = RunPaths::new(&out);
            let ds = artifacts::read_dataset_csv(
                &dataset.unwrap_or_else(|| paths.dataset()),
            )?;
            let (model, curve) = pipeline::train_stage(&config, &ds)?;
            artifacts::save_model(&paths.model(), &model, &config.hash())?;
            if !curve.is_empty() {
                artifacts::write_loss_csv(&paths.loss(), &curve, &config.hash())?;
            }
            println!("wrote {}", paths.model().display());
            Ok(())
        }
        Command::Refine {
            common,
            model,
            dataset,
        } => {
            let (config, out) = load_config(&common)?;
            let paths = RunPaths::new(&out);
            let system = config.build_system()?;
            let cfg = config.integration()?;
            let base = artifacts::load_model(&model_path(&paths, &model))?;
            let ds = artifacts::read_dataset_csv(
                &dataset.unwrap_or_else(|| paths.dataset()),
            )?;
            let (refined, curve) = pipeline::refine_stage(&config, &system, &cfg, &base, &ds)?;
            artifacts::save_model(&paths.model_refined(), &refined, &config.hash())?;
            artifacts::write_loss_csv(&paths.loss_refine(), &curve, &config.hash())?;
            println!("wrote {}", paths.model_refined().display());
            Ok(())
        }
        Command::Control(args) => single_model_stage(args, pipeline::control_stage),
        Command::Heatmap(args) => single_model_stage(args, pipeline::analyze_only_heatmap),
        Command::Basin(args) => single_model_stage(args, pipeline::analyze_only_basin),
        Command::Bound(args) => single_model_stage(args, pipeline::analyze_only_bound),
        Command::Predict(args) => single_model_stage(args, pipeline::analyze_only_predict),
    }
}

type StageFn = fn(
    &ExperimentConfig,
    &koopman_core::dynamics::DynamicalSystem,
    &koopman_core::dynamics::IntegrationConfig,
    &koopman_core::training::KoopmanModel,
    &RunPaths,
    &str,
    &str,
) -> anyhow::Result<()>;

fn single_model_stage(args: ModelArgs, stage: StageFn) -> anyhow::Result<()> {
    let (config, out) = load_config(&args.common)?;
    let paths = RunPaths::new(&out);
    let system = config.build_system()?;
    let cfg = config.integration()?;
    let model = artifacts::load_model(&model_path(&paths, &args.model))?;
    stage(&config, &system, &cfg, &model, &paths, "", &config.hash())
}
