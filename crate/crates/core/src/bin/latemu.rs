use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use latemu::config::ExperimentConfig;
use latemu::diffusion::EmulatorKind;
use latemu::pipeline::{Outcome, Pipeline, CACHE_ENV};
use latemu::rollout::RolloutKind;

#[derive(Parser, Debug)]
#[command(name = "latemu", version, about = "Latent-space emulation of dynamical systems")]
struct Cli {
    /// TOML experiment configuration; missing fields take desk-preset defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Start from a named preset (desk, smoke) instead of a file.
    #[arg(long, global = true, conflicts_with = "config")]
    preset: Option<String>,
    /// Override a configuration value, e.g. `--set dataset.train=64`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (overrides `output` in the configuration).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Latent cache root.
    #[arg(long, global = true, env = CACHE_ENV)]
    cache: Option<PathBuf>,
    /// Re-run stages even when their outputs are up to date.
    #[arg(long, global = true)]
    force: bool,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Diffusion,
    Solver,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RolloutArg {
    Diffusion,
    Solver,
    Persistence,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/val/test trajectories and fit the normalizer.
    Generate,
    /// Train autoencoders (all of them unless `--ae` is given).
    TrainAe {
        #[arg(long)]
        ae: Option<String>,
    },
    /// Encode every trajectory into the latent cache.
    Encode {
        #[arg(long)]
        ae: Option<String>,
    },
    /// Train latent emulators.
    TrainEmulator {
        #[arg(long)]
        ae: Option<String>,
        #[arg(long, value_enum)]
        kind: Option<Kind>,
    },
    /// Roll out test trajectories.
    Rollout {
        #[arg(long)]
        ae: Option<String>,
        #[arg(long, value_enum)]
        kind: Option<RolloutArg>,
        /// Ensemble seed; defaults to `evaluation.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score rollouts and write the CSV/SVG report.
    Evaluate,
    /// Run every stage for the full compression-rate x emulator matrix.
    Sweep,
    /// Print the resolved configuration and its hash.
    ShowConfig,
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, latemu::Error> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| latemu::Error::Config(format!("override `{s}` is not KEY=VALUE")))
        })
        .collect()
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut overrides = parse_overrides(&cli.overrides)?;
    if let Some(out) = &cli.out {
        overrides.push(("output".into(), format!("{:?}", out.display().to_string())));
    }
    let config = match (&cli.config, &cli.preset) {
        (Some(path), _) => ExperimentConfig::load(path, &overrides)?,
        (None, Some(name)) => {
            let base = ExperimentConfig::preset(name)?;
            ExperimentConfig::from_toml_with(&base.to_toml(), &format!("preset {name}"), &overrides)?
        }
        (None, None) => ExperimentConfig::from_toml_with("", "defaults", &overrides)?,
    };
    Ok(config)
}

fn selected<'a>(config: &'a ExperimentConfig, ae: &'a Option<String>) -> Result<Vec<&'a str>> {
    match ae {
        Some(name) => {
            config.autoencoder(name)?;
            Ok(vec![name.as_str()])
        }
        None => Ok(config.autoencoders.iter().map(|a| a.name.as_str()).collect()),
    }
}

fn report(o: &Outcome) {
    let state = if o.skipped { "up to date" } else { "done" };
    println!("{:<15} {:<10} {}", o.stage, state, o.output.display());
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    let config = load_config(cli)?;
    let mut pipeline = Pipeline::new(config, cli.force)?;
    if let Some(root) = &cli.cache {
        pipeline = pipeline.with_cache_root(root);
    }
    let cfg = pipeline.config.clone();
    match &cli.command {
        Command::ShowConfig => {
            let mut out = std::io::stdout().lock();
            let written = write!(out, "# config {}\n{}", pipeline.hash, cfg.to_toml());
            match written {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                other => other.context("writing the configuration")?,
            }
        }
        Command::Generate => report(&pipeline.cmd_generate()?),
        Command::TrainAe { ae } => {
            for name in selected(&cfg, ae)? {
                report(&pipeline.cmd_train_ae(name)?);
            }
        }
        Command::Encode { ae } => {
            for name in selected(&cfg, ae)? {
                report(&pipeline.cmd_encode(name)?);
            }
        }
        Command::TrainEmulator { ae, kind } => {
            let kinds = match kind {
                Some(Kind::Diffusion) => vec![EmulatorKind::Diffusion],
                Some(Kind::Solver) => vec![EmulatorKind::Solver],
                None => cfg.emulator.kinds.clone(),
            };
            for name in selected(&cfg, ae)?.into_iter().filter(|n| ae.is_some() || cfg.emulator.covers(n)) {
                for &k in &kinds {
                    report(&pipeline.cmd_train_emulator(name, k)?);
                }
            }
        }
        Command::Rollout { ae, kind, seed } => {
            let seed = seed.unwrap_or(cfg.evaluation.seed);
            for name in selected(&cfg, ae)? {
                let kinds = match kind {
                    Some(RolloutArg::Diffusion) => vec![RolloutKind::Diffusion],
                    Some(RolloutArg::Solver) => vec![RolloutKind::Solver],
                    Some(RolloutArg::Persistence) => vec![RolloutKind::Persistence],
                    None => pipeline.rollout_kinds(name),
                };
                for &k in &kinds {
                    report(&pipeline.cmd_rollout(name, k, seed)?);
                }
            }
        }
        Command::Evaluate => report(&pipeline.cmd_evaluate()?),
        Command::Sweep => {
            for o in pipeline.cmd_sweep()? {
                report(&o);
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<latemu::Error>()) {
        Some(latemu::Error::Config(_)) => 2,
        Some(latemu::Error::Dependency { .. } | latemu::Error::Provenance(_)) => 3,
        Some(latemu::Error::Numerical { .. }) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
