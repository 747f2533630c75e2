use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use trinity_cli::commands::{
    cmd_ablate, cmd_eval, cmd_gen, cmd_train, parse_grid, AblateArgs, EvalArgs, GenArgs, TrainArgs, TrainOverrides,
};
use trinity_cli::CliResult;
use trinity_core::fusion::OptimizerKind;

#[derive(Parser)]
#[command(name = "trinity", version, about = "Caption, image and frequency fusion detector for synthetic images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic real/fake toy dataset and its manifests.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count_per_class: Option<usize>,
    },
    /// Train a detector on a manifest and save a checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Evaluate a checkpoint over manifests and a perturbation grid.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long, default_value = "none,jpeg80,jpeg50,blur1,blur2")]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate each configuration of an ablation plan.
    Ablate {
        #[arg(long)]
        train_manifest: PathBuf,
        #[arg(long = "eval-manifest", required = true)]
        eval_manifests: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSON list of `{name, flags}`; defaults to the four standard rows.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Args)]
struct OverrideArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    optimizer: Option<Optimizer>,
}

impl From<OverrideArgs> for TrainOverrides {
    fn from(a: OverrideArgs) -> Self {
        TrainOverrides {
            seed: a.seed,
            epochs: a.epochs,
            learning_rate: a.learning_rate,
            batch_size: a.batch_size,
            optimizer: a.optimizer.map(|o| match o {
                Optimizer::Sgd => OptimizerKind::Sgd,
                Optimizer::Adam => OptimizerKind::Adam,
            }),
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen {
            config,
            out,
            seed,
            count_per_class,
        } => {
            let s = cmd_gen(&GenArgs {
                config,
                out,
                seed,
                count_per_class,
            })?;
            println!("wrote {} images, manifest {}", s.images, s.manifest.display());
            if let Some((train, test)) = s.split {
                println!("split: {} / {}", train.display(), test.display());
            }
        }
        Command::Train {
            manifest,
            config,
            out,
            overrides,
        } => {
            let s = cmd_train(&TrainArgs {
                manifest,
                config,
                out: out.clone(),
                overrides: overrides.into(),
            })?;
            println!("seed {}", s.seed);
            println!("samples {}", s.samples);
            println!("probe loss {:.6} -> {:.6}", s.initial_probe_loss, s.final_probe_loss);
            println!("checkpoint {} sha256 {}", out.display(), s.checkpoint.sha256);
        }
        Command::Eval {
            checkpoint,
            manifests,
            grid,
            out,
        } => {
            let report = cmd_eval(&EvalArgs {
                checkpoint,
                manifests,
                out,
                grid: parse_grid(&grid)?,
            })?;
            print!("{}", report.to_csv());
        }
        Command::Ablate {
            train_manifest,
            eval_manifests,
            config,
            plan,
            out,
            overrides,
        } => {
            let report = cmd_ablate(&AblateArgs {
                train_manifest,
                eval_manifests,
                config,
                plan,
                out,
                overrides: overrides.into(),
            })?;
            print!("{}", report.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with status 2 on bad arguments
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("trinity: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
