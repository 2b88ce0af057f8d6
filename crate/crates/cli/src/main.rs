//! `dnc`: command-line driver for Divide-and-Contrast runs.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error,
//! 3 missing or mismatched prerequisite, 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use dnc_core::config::{RunConfig, PRESETS};
use dnc_core::data::{save_dataset, Storage};
use dnc_core::eval::{compare_runs, emit_report, probe_run};
use dnc_core::pipeline::{ablate, run_dnc, run_moclr, RunOptions, Stage, StageTag, CONFIG_FILE, VARIANTS};
use dnc_core::Error;

#[derive(Parser, Debug)]
#[command(name = "dnc", version, about = "Divide-and-Contrast self-supervised pretraining")]
struct Cli {
    /// Threads for stage-2 experts [env: DNC_WORKERS]
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Log every training step
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML run configuration
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,

    /// Bundled configuration (toy-uncurated, toy-curated)
    #[arg(long)]
    preset: Option<String>,

    /// Override the master seed
    #[arg(long)]
    seed: Option<u64>,

    /// Run directory [env: DNC_OUTPUT_DIR]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the corpus and probe sets of a configuration to disk
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// One PNG per item instead of a packed array file
        #[arg(long)]
        png: bool,
    },
    /// Stage 1: train the base model
    TrainBase(ConfigArgs),
    /// Cluster the base model's representations (needs stage 1)
    Cluster(ConfigArgs),
    /// Stage 2: train one expert per cluster (needs clusters)
    TrainExperts(ConfigArgs),
    /// Stage 3: distil base and experts into one model (needs stage 2)
    Distill(ConfigArgs),
    /// Train the single-stage baseline with the whole budget
    TrainMoclr(ConfigArgs),
    /// All stages, resuming from whatever is already in the run directory
    RunDnc(ConfigArgs),
    /// Linear probe of a run's checkpoints
    Probe {
        /// Run directory
        run: PathBuf,
        /// Stages to probe (base, expert-<k>, distilled, moclr); default all
        #[arg(long = "stage")]
        stages: Vec<StageTag>,
    },
    /// Metrics and figures for one run, or a comparison of several
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Where to write the comparison of several runs
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run and probe the ablation variants, sharing upstream stages
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated subset of the variants
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Prerequisite(_) | Error::DigestMismatch { .. } => 3,
        Error::NumericDivergence { .. } | Error::NumericDomain(_) => 4,
        _ => 1,
    }
}

fn env_path(name: &str) -> Option<PathBuf> {
    std::env::var_os(name).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn workers(cli: &Cli) -> Result<usize, Error> {
    if let Some(w) = cli.workers {
        return Ok(w.max(1));
    }
    match std::env::var("DNC_WORKERS") {
        Ok(v) => v
            .parse::<usize>()
            .map(|w| w.max(1))
            .map_err(|_| Error::Config(vec![format!("DNC_WORKERS must be a positive integer, got `{v}`")])),
        Err(_) => Ok(1),
    }
}

/// Resolve the configuration and run directory. Without `--config` or
/// `--preset`, the configuration stored in the run directory is used.
fn resolve(a: &ConfigArgs) -> Result<(RunConfig, PathBuf), Error> {
    let out = a.out.clone().or_else(|| env_path("DNC_OUTPUT_DIR"));
    let mut cfg = match (&a.config, &a.preset) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => match &out {
            Some(dir) if dir.join(CONFIG_FILE).exists() => RunConfig::load(&dir.join(CONFIG_FILE))?,
            _ => {
                return Err(Error::Config(vec![format!(
                    "give --config, --preset (one of {}) or an existing run directory",
                    PRESETS.join(", ")
                )]))
            }
        },
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let dir = out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| Path::new("runs").join(&cfg.name));
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    Ok((cfg, dir))
}

fn stage(a: &ConfigArgs, stop_after: Stage, workers: usize) -> Result<(), Error> {
    let (cfg, dir) = resolve(a)?;
    let opts = RunOptions {
        workers,
        stop_after,
        compute_upstream: false,
    };
    let (_, summary) = run_dnc(&cfg, &dir, &opts)?;
    for r in summary.records.iter().filter(|r| !r.resumed) {
        println!("{}: {} steps in {:.1}s", r.stage, r.steps, r.wall_seconds);
    }
    println!("{}", dir.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    let workers = workers(cli)?;
    match &cli.command {
        Command::Synth { cfg, png } => {
            let (cfg, dir) = resolve(cfg)?;
            let data = cfg.materialize()?;
            let storage = if *png { Storage::Files } else { Storage::Packed };
            for (name, d) in [
                ("corpus", &data.corpus),
                ("probe-train", &data.probe_train),
                ("probe-test", &data.probe_test),
            ] {
                save_dataset(d, &dir.join(name), storage)?;
                println!("{name}: {} items, class sizes {:?}", d.len(), d.class_histogram());
            }
        }
        Command::TrainBase(a) => {
            let (cfg, dir) = resolve(a)?;
            let opts = RunOptions {
                workers,
                stop_after: Stage::Base,
                compute_upstream: true,
            };
            run_dnc(&cfg, &dir, &opts)?;
            println!("{}", dir.display());
        }
        Command::Cluster(a) => stage(a, Stage::Clusters, workers)?,
        Command::TrainExperts(a) => stage(a, Stage::Experts, workers)?,
        Command::Distill(a) => stage(a, Stage::Distilled, workers)?,
        Command::TrainMoclr(a) => {
            let (cfg, dir) = resolve(a)?;
            run_moclr(&cfg, &dir)?;
            println!("{}", dir.display());
        }
        Command::RunDnc(a) => {
            let (cfg, dir) = resolve(a)?;
            let opts = RunOptions {
                workers,
                ..RunOptions::default()
            };
            let (_, summary) = run_dnc(&cfg, &dir, &opts)?;
            for r in &summary.records {
                info!("{}: {} steps, {:.1}s", r.stage, r.steps, r.wall_seconds);
            }
            println!("{}", dir.display());
        }
        Command::Probe { run, stages } => {
            for e in probe_run(run, stages)? {
                println!(
                    "{} {}: top-1 {:.4}{} (lr {})",
                    e.method,
                    e.stage,
                    e.result.top1,
                    e.result.top5.map_or(String::new(), |t| format!(", top-5 {t:.4}")),
                    e.result.chosen_lr
                );
            }
        }
        Command::Report { runs, out } => {
            for r in runs {
                let rep = emit_report(r)?;
                println!("{}: {} records, figures {:?}", r.display(), rep.records.len(), rep.figures);
            }
            if runs.len() > 1 {
                let out = out
                    .clone()
                    .or_else(|| env_path("DNC_OUTPUT_DIR"))
                    .unwrap_or_else(|| PathBuf::from("comparison"));
                print!("{}", compare_runs(runs, &out)?);
            }
        }
        Command::Ablate { cfg, variants } => {
            let (cfg, dir) = resolve(cfg)?;
            let names: Vec<&str> = if variants.is_empty() {
                VARIANTS.to_vec()
            } else {
                variants.iter().map(String::as_str).collect()
            };
            let opts = RunOptions {
                workers,
                ..RunOptions::default()
            };
            for r in ablate(&cfg, &dir, &names, &opts)? {
                println!("{:>16}  top-1 {:.4}", r.variant, r.eval.result.top1);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Config(v) = &e {
                for line in v {
                    eprintln!("  - {line}");
                }
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
