use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use scrl_core::datamodel::{load_dataset, SpotId};
use scrl_core::evalharness::{budget_sweep, fold_rows, metrics, select_pool, write_report, MetricTriple, Strategy};
use scrl_core::policy::Episode;
use scrl_core::predictor::{load_checkpoint, save_checkpoint, train};
use scrl_core::rewards::RewardContext;
use scrl_core::synthgen::generate_to_dir;
use scrl_core::{Dataset32, Error, Predictor32, RunConfig};

#[derive(Parser)]
#[command(name = "scrl", version, about = "Budgeted spot sampling and expression prediction")]
struct Cli {
    /// TOML run configuration; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=20`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Choose a pool of spots to reveal.
    Sample {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        strategy: Strategy,
        /// Fraction of candidate spots, in (0, 1].
        #[arg(long)]
        budget: f64,
        #[arg(long)]
        out: PathBuf,
        /// Restrict candidates to the training side of this fold.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Train the predictor on a pool.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the held-out slides of one fold.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        fold: usize,
        /// Also write the metrics here as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the strategy x budget x fold x seed grid.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolFile {
    strategy: Strategy,
    ratio: f64,
    fold: Option<usize>,
    seed: u64,
    pool: Vec<SpotId>,
    episodes: Vec<Episode>,
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    fold: usize,
    test_spots: usize,
    #[serde(flatten)]
    metrics: MetricTriple,
}

enum Failure {
    Usage(String),
    Engine(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Engine(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Budget(_) => 2,
        Error::Numeric(_) | Error::State(_) => 4,
        Error::Format { .. }
        | Error::Truncation { .. }
        | Error::Schema(_)
        | Error::Io { .. }
        | Error::Dimension(_)
        | Error::Key(_)
        | Error::Value(_) => 3,
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.set(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<(), Error> {
    let dir = parent_dir(path);
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let text = serde_json::to_string_pretty(value).expect("output serializes");
    fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = resolve_config(&cli)?;
    match cli.command {
        Command::Synth { out } => {
            let data = generate_to_dir(&cfg.synth, &out)?;
            cfg.write_resolved(&out)?;
            info!("wrote {} spots to {}", data.dataset.len(), out.display());
        }
        Command::Sample {
            data,
            strategy,
            budget,
            out,
            fold,
        } => {
            if !(budget > 0.0 && budget <= 1.0) {
                return Err(Failure::Usage(format!("--budget must lie in (0, 1], got {budget}")));
            }
            let ds: Dataset32 = load_dataset(&data)?;
            let candidates = match fold {
                Some(f) => fold_rows(&ds, cfg.sweep.folds, cfg.sweep.split_seed, f)?.0,
                None => (0..ds.len()).collect(),
            };
            let ctx = RewardContext::fit(&ds.reference, &cfg.reward)?;
            let seed = cfg.sampler.seed;
            let sel = select_pool(strategy, &ds, &candidates, budget, &cfg, seed, &ctx)?;
            let file = PoolFile {
                strategy,
                ratio: budget,
                fold,
                seed,
                pool: sel.pool,
                episodes: sel.episodes,
            };
            write_json(&file, &out)?;
            cfg.write_resolved(parent_dir(&out))?;
            info!("selected {} of {} candidates", file.pool.len(), candidates.len());
        }
        Command::Train { data, pool, out } => {
            let ds: Dataset32 = load_dataset(&data)?;
            let text = fs::read_to_string(&pool).map_err(|e| Error::Io {
                path: pool.clone(),
                source: e,
            })?;
            let file: PoolFile = serde_json::from_str(&text).map_err(|e| Error::Format {
                path: pool.clone(),
                msg: e.to_string(),
            })?;
            ds.reveal(&file.pool)?;
            let (model, log) = train(&ds, &file.pool, &cfg.train)?;
            save_checkpoint(&model, &out)?;
            let lines: Vec<String> = log
                .iter()
                .map(|ep| serde_json::to_string(ep).expect("epoch log serializes"))
                .collect();
            let path = out.join("train_log.jsonl");
            fs::write(&path, lines.join("\n") + "\n").map_err(|e| Error::Io { path, source: e })?;
            cfg.write_resolved(&out)?;
        }
        Command::Eval { data, ckpt, fold, out } => {
            let ds: Dataset32 = load_dataset(&data)?;
            let model: Predictor32 = load_checkpoint(&ckpt)?;
            let (_, test_rows) = fold_rows(&ds, cfg.sweep.folds, cfg.sweep.split_seed, fold)?;
            if test_rows.is_empty() {
                return Err(Error::Config(format!("fold {fold} holds no spots")).into());
            }
            let pred = model.predict(&ds.features.select_rows(&test_rows))?;
            let m = metrics(&ds.ground_truth(&test_rows), &pred)?;
            let result = EvalOutput {
                fold,
                test_spots: test_rows.len(),
                metrics: m,
            };
            println!("{}", serde_json::to_string(&result).expect("metrics serialize"));
            if let Some(path) = out {
                write_json(&result, &path)?;
                cfg.write_resolved(parent_dir(&path))?;
            }
        }
        Command::Sweep { data, out } => {
            let ds: Dataset32 = load_dataset(&data)?;
            cfg.write_resolved(&out)?;
            let report = budget_sweep(&ds, &cfg, Some(&out))?;
            let summary = write_report(&report, &out)?;
            let failed: usize = summary.groups.iter().map(|g| g.failed).sum();
            info!("{} cells, {failed} failed", summary.rows);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Engine(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
