//! `ws3`: train, prune, evaluate, benchmark and inspect sparse 3D U-Nets.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ws3_core::layers::network::Preset;
use ws3_core::ws3::BenchReport;

use ws3_cli::commands::{self, format_count, BENCH_NETWORK_HEADER, CHECKPOINT_FILE};
use ws3_cli::{CliError, CliResult, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "ws3", version, about = "Weight-sparse spatially sparse 3D convolution toolkit")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (default: logical cores). `1` gives reference determinism.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// Logging verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct CheckpointArg {
    /// Checkpoint to read (default: `<output_dir>/model.wsck`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network and write a checkpoint, a loss log and metrics.
    Train {
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        width: Option<f64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Iteratively prune a checkpoint, or apply z-axis structural pruning.
    Prune {
        #[command(flatten)]
        ckpt: CheckpointArg,
        /// Overall pruning rate; the per-step fraction is `1 − (1 − rate)^(1/steps)`.
        #[arg(long)]
        target_rate: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// L1G, L1L, FGG, FGL, L1SG or L1SL.
        #[arg(long)]
        criterion: Option<String>,
        /// Fine-tuning iterations after each pruning step.
        #[arg(long)]
        fine_tune_iters: Option<usize>,
        /// Comma-separated layers or blocks (e.g. `block7,block8`) for z-axis pruning.
        #[arg(long, value_delimiter = ',')]
        structural: Option<Vec<String>>,
    },
    /// Evaluate a checkpoint on the configured evaluation scenes.
    Eval {
        #[command(flatten)]
        ckpt: CheckpointArg,
    },
    /// Time dense vs WS³ layers (synthetic sweep, plus a whole network when given a checkpoint).
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print parameter counts of a checkpoint or a fresh preset.
    Count {
        #[arg(long, conflicts_with = "preset")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 1.0)]
        width: f64,
        #[arg(long, default_value_t = 20)]
        classes: usize,
    },
    /// Write per-layer remaining counts and offset densities of a checkpoint.
    Report {
        #[command(flatten)]
        ckpt: CheckpointArg,
        /// Comma-separated layers or blocks for the density report (default: all spatial layers).
        #[arg(long, value_delimiter = ',')]
        layers: Vec<String>,
    },
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &cli.output {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn revalidate(cfg: &RunConfig, cli: &Cli) -> CliResult<()> {
    cfg.validate().map_err(|message| match &cli.config {
        Some(path) => CliError::Config { path: path.clone(), message },
        None => CliError::Usage(message),
    })
}

fn checkpoint_path(cfg: &RunConfig, arg: &Option<PathBuf>) -> PathBuf {
    arg.clone().unwrap_or_else(|| cfg.output_dir.join(CHECKPOINT_FILE))
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::Train { preset, width, iterations, seed } => {
            if let Some(p) = preset {
                cfg.model.preset = p.clone();
            }
            if let Some(w) = width {
                cfg.model.width = *w;
            }
            if let Some(i) = iterations {
                cfg.trainer.iterations = *i;
            }
            if let Some(s) = seed {
                cfg.trainer.seed = *s;
                cfg.model.seed = *s;
            }
            revalidate(&cfg, &cli)?;
            let s = commands::cmd_train(&cfg)?;
            println!("final loss {:.6}", s.final_loss);
            println!("final mIoU {:.6}", s.metrics.miou);
            println!("final mAcc {:.6}", s.metrics.macc);
            println!("checkpoint {}", s.checkpoint.display());
        }
        Command::Prune { ckpt, target_rate, steps, criterion, fine_tune_iters, structural } => {
            if let Some(t) = target_rate {
                cfg.prune.target_rate = *t;
            }
            if let Some(s) = steps {
                cfg.prune.steps = *s;
            }
            if let Some(c) = criterion {
                cfg.prune.criterion = c.clone();
            }
            if let Some(i) = fine_tune_iters {
                cfg.prune.i_prune = *i;
            }
            if let Some(l) = structural {
                cfg.prune.structural = l.clone();
            }
            revalidate(&cfg, &cli)?;
            let path = checkpoint_path(&cfg, &ckpt.checkpoint);
            let s = commands::cmd_prune(&cfg, &path)?;
            if s.noop {
                println!("warning: target rate {} is a no-op", cfg.prune.target_rate);
            }
            if let Some(p) = s.p {
                println!("per-step p {p:.6}");
            }
            print!("{}", s.log.to_csv());
            println!("remaining_fraction {:.6}", s.counts.remaining_fraction());
            println!("checkpoint {}", s.checkpoint.display());
        }
        Command::Eval { ckpt } => {
            revalidate(&cfg, &cli)?;
            let m = commands::cmd_eval(&cfg, &checkpoint_path(&cfg, &ckpt.checkpoint))?;
            println!("mIoU {:.6}", m.miou);
            println!("mAcc {:.6}", m.macc);
        }
        Command::Bench { checkpoint } => {
            revalidate(&cfg, &cli)?;
            let s = commands::cmd_bench(&cfg, checkpoint.as_deref())?;
            println!("{}", BenchReport::CSV_HEADER);
            s.layers.iter().for_each(|r| println!("{}", r.csv_row()));
            if !s.network.is_empty() {
                println!("{BENCH_NETWORK_HEADER}");
                s.network.iter().for_each(|r| println!("{}", r.csv_row()));
            }
        }
        Command::Count { checkpoint, preset, width, classes } => {
            let preset = match preset {
                Some(p) => Some((
                    Preset::parse(p).ok_or_else(|| CliError::Usage(format!("unknown preset {p:?}")))?,
                    *width,
                )),
                None => None,
            };
            let (name, c) = commands::cmd_count(checkpoint.as_deref().map(Path::new), preset, *classes)?;
            print!("{}", format_count(&name, &c));
        }
        Command::Report { ckpt, layers } => {
            revalidate(&cfg, &cli)?;
            let c = commands::cmd_report(&cfg, &checkpoint_path(&cfg, &ckpt.checkpoint), layers)?;
            print!("{}", format_count("report", &c));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
