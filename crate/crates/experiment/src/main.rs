use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use tmra_core::baselines::AblationVariant;
use tmra_core::checkpoint::Checkpoint;
use tmra_experiment::config::{ExperimentConfig, ReferencePolicy};
use tmra_experiment::container::DatasetContainer;
use tmra_experiment::dataset::{generate_container, Dataset};
use tmra_experiment::pipeline::{ablate, evaluate, reconstruct_dataset, train_experiment, Reconstructions};

#[derive(Parser)]
#[command(name = "tmra", version, about = "Desk-scale unsupervised reconstruction experiments")]
struct Cli {
    /// Experiment configuration (JSON); defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Reference {
    GroundTruth,
    GrappaVsMax,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the phantom suite and write the dataset.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the training split; `--checkpoint` resumes from a saved epoch.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Reconstruct the held-out split at one or all trained view-sharing numbers.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        vs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute metrics, start-to-peak tables and plots.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        reconstructions: PathBuf,
        #[arg(long, value_enum)]
        reference: Option<Reference>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every ablation variant.
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        /// View-sharing number of the evaluation inputs.
        #[arg(long, default_value_t = 2)]
        vs: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let config = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    Ok(match cli.seed {
        Some(s) => config.with_seed(s),
        None => config,
    })
}

fn load_dataset(dir: &Path) -> Result<(DatasetContainer, Dataset)> {
    let c = DatasetContainer::read(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    let d = Dataset::from_container(&c)?;
    Ok((c, d))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let config = load_config(&cli)?;
    config.validate()?;
    match &cli.command {
        Command::GenerateData { out } => {
            let c = generate_container(&config)?;
            c.write(out)?;
            write_json(&out.join("config.json"), &config)?;
            log::info!("wrote {} arrays to {}", c.manifest.arrays.len(), out.display());
        }
        Command::Train { dataset, out, checkpoint } => {
            let (_, d) = load_dataset(dataset)?;
            let outcome = train_experiment(&config, &d, out, checkpoint.as_deref())?;
            write_json(&out.join("config.json"), &config)?;
            match outcome.checkpoints.last() {
                Some(p) => log::info!("final checkpoint {}", p.display()),
                None => log::warn!("no epochs left to run"),
            }
        }
        Command::Reconstruct { checkpoint, dataset, vs, out } => {
            let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let (c, d) = load_dataset(dataset)?;
            let vs_list = match vs {
                Some(v) => vec![*v],
                None => ck.config.vs_choices.clone(),
            };
            let (recons, latency) = reconstruct_dataset(&ck.generator, &ck.config.vs_choices, &d, &vs_list)?;
            recons.to_container(&c.manifest)?.write(out)?;
            write_json(&out.join("latency.json"), &latency)?;
            log::info!("{} frames, {:.4} s per frame", latency.frames, latency.mean_seconds);
        }
        Command::Evaluate { dataset, reconstructions, reference, out } => {
            let (_, d) = load_dataset(dataset)?;
            let recons = Reconstructions::from_container(&DatasetContainer::read(reconstructions)?)?;
            let mut eval = config.evaluation.clone();
            if let Some(r) = reference {
                eval.reference = match r {
                    Reference::GroundTruth => ReferencePolicy::GroundTruth,
                    Reference::GrappaVsMax => ReferencePolicy::GrappaVsMax,
                };
            }
            let report = evaluate(&d, &recons, &eval, out)?;
            write_json(&out.join("report.json"), &report)?;
            for vs in &recons.vs {
                if let (Some(p), Some(a)) = (report.median_psnr("proposed", *vs), report.median_psnr("aliased", *vs)) {
                    log::info!("vs {vs}: median PSNR {p:.2} dB (aliased input {a:.2} dB)");
                }
            }
        }
        Command::Ablate { dataset, vs, out } => {
            let (_, d) = load_dataset(dataset)?;
            if !d.vs_choices.contains(vs) {
                bail!("dataset has no aliased images at vs {vs}");
            }
            fs::create_dir_all(out)?;
            let report = ablate(&config, &d, &AblationVariant::ALL, *vs)?;
            write_json(&out.join("ablation.json"), &report)?;
            for (name, margin) in &report.margins_db {
                log::info!("proposed minus {name}: {margin:+.2} dB");
            }
        }
    }
    Ok(())
}
