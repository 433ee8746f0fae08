use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use stimtrain::destruction::{enumerate_deletions, enumerate_permutations, plans_to_jsonl};
use stimtrain::evaluation::BoundMode;
use stimtrain::SubnetMask;
use stimtrain_cli::commands::{launch, replay, source_config};
use stimtrain_cli::run::{DestructKind, Invocation, TrainMode};
use stimtrain_cli::{exit_code, Config, ConfigError};

#[derive(Parser)]
#[command(
    name = "stimtrain",
    version,
    about = "Train residual MLPs with sub-network KL supervision and probe their sub-networks"
)]
struct Cli {
    /// Worker threads for evaluation fan-out (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML file with [network], [data], [train] and [eval] sections.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. --set train.lambda=5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set_values: Vec<String>,

    /// Shorthand for --set train.seed=N --set data.seed=N.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        if let Some(s) = self.seed {
            o.push(format!("train.seed={s}"));
            o.push(format!("data.seed={s}"));
        }
        o.extend(self.set_values.iter().cloned());
        o
    }

    fn resolve(&self) -> Result<Config> {
        Config::resolve(self.config.as_deref(), &self.overrides())
    }

    fn resolve_over(&self, base: &Config) -> Result<Config> {
        Config::resolve_over(base, self.config.as_deref(), &self.overrides())
    }
}

#[derive(Args, Clone)]
struct OutArg {
    /// Run directory to create (default: a fresh directory under $STIMTRAIN_OUT or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BoundModeArg {
    PerSample,
    BatchMean,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write metrics, periodic checkpoints and a final evaluation.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        mode: TrainMode,
        /// Kept blocks per stage for --mode individual, e.g. 1,1,1,1,1 (default: the smallest mask).
        #[arg(long, value_delimiter = ',')]
        mask: Option<Vec<usize>>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Evaluate every ordered sub-network of a checkpoint.
    EvalSubnets {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Use the stored running statistics instead of recalibrating per mask.
        #[arg(long)]
        no_recalibrate: bool,
        /// Refuse to enumerate more masks than this.
        #[arg(long)]
        cap: Option<usize>,
        /// Evaluate this many randomly sampled masks instead of all of them.
        #[arg(long)]
        sample: Option<usize>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Delete or reorder layers of a common- and a stimulative-trained network and compare the damage.
    Destruct {
        #[arg(long)]
        ct: PathBuf,
        #[arg(long)]
        st: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, required_unless_present = "plans")]
        kind: Option<DestructKind>,
        /// Largest number of deleted layers for --kind delete-k [default: 3].
        #[arg(long)]
        max_k: Option<usize>,
        /// Largest permutation complexity for --kind permute [default: 4].
        #[arg(long)]
        max_c: Option<usize>,
        /// JSONL file of explicit plans (see `stimtrain plans`).
        #[arg(long)]
        plans: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// KL distance from the main network to every sub-network, per checkpoint of a training run.
    TrackKl {
        run_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArg,
    },
    /// Check the sub-network cross-entropy bound on every checkpoint of a training run.
    BoundCheck {
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value = "per-sample")]
        mode: BoundModeArg,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArg,
    },
    /// Re-run a recorded invocation from its manifest.
    Replay {
        /// A manifest.json or the run directory holding it.
        manifest: PathBuf,
        #[command(flatten)]
        out: OutArg,
        /// Fail unless every deterministic artifact matches the original byte for byte.
        #[arg(long)]
        verify: bool,
    },
    /// Print destruction plans as JSONL.
    Plans {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        kind: DestructKind,
        /// Number of deleted layers, or permutation complexity.
        #[arg(long, default_value_t = 1)]
        level: usize,
    },
    /// Print the resolved configuration as TOML.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::Train {
            cfg,
            mode,
            mask,
            out,
        } => {
            let config = cfg.resolve()?;
            let inv = Invocation::Train {
                mode,
                mask: mask.map(SubnetMask::new),
            };
            launch(out.out.as_deref(), inv, &config)?;
        }
        Command::EvalSubnets {
            checkpoint,
            cfg,
            no_recalibrate,
            cap,
            sample,
            out,
        } => {
            let mut config = cfg.resolve()?;
            config.eval.recalibrate &= !no_recalibrate;
            if let Some(c) = cap {
                config.eval.cap = c;
            }
            let inv = Invocation::EvalSubnets {
                checkpoint: absolute(&checkpoint)?,
                sample,
            };
            let dir = launch(out.out.as_deref(), inv, &config)?;
            println!("wrote {}", dir.display());
        }
        Command::Destruct {
            ct,
            st,
            cfg,
            kind,
            max_k,
            max_c,
            plans,
            out,
        } => {
            if max_k == Some(0) || max_c == Some(0) {
                return Err(stimtrain::Error::Validation(
                    "--max-k / --max-c must be at least 1".into(),
                )
                .into());
            }
            let config = cfg.resolve()?;
            let max_level = match kind {
                Some(DestructKind::DeleteOne) | None => 1,
                Some(DestructKind::DeleteK) => max_k.unwrap_or(3),
                Some(DestructKind::Permute) => max_c.unwrap_or(4),
            };
            let inv = Invocation::Destruct {
                ct: absolute(&ct)?,
                st: absolute(&st)?,
                kind,
                max_level,
                plans: plans.as_deref().map(absolute).transpose()?,
            };
            let dir = launch(out.out.as_deref(), inv, &config)?;
            println!("wrote {}", dir.display());
        }
        Command::TrackKl { run_dir, cfg, out } => {
            let config = cfg.resolve_over(&source_config(&run_dir)?)?;
            let inv = Invocation::TrackKl {
                run_dir: absolute(&run_dir)?,
            };
            let dir = launch(out.out.as_deref(), inv, &config)?;
            println!("wrote {}", dir.display());
        }
        Command::BoundCheck {
            run_dir,
            mode,
            cfg,
            out,
        } => {
            let config = cfg.resolve_over(&source_config(&run_dir)?)?;
            let mode = match mode {
                BoundModeArg::PerSample => BoundMode::PerSample,
                BoundModeArg::BatchMean => BoundMode::BatchMean,
            };
            let inv = Invocation::BoundCheck {
                run_dir: absolute(&run_dir)?,
                mode,
            };
            let dir = launch(out.out.as_deref(), inv, &config)?;
            println!("wrote {}", dir.display());
        }
        Command::Replay {
            manifest,
            out,
            verify,
        } => {
            let dir = replay(&manifest, out.out.as_deref(), verify)?;
            println!("replayed into {}", dir.display());
            if verify {
                println!("all deterministic artifacts match");
            }
        }
        Command::Plans { cfg, kind, level } => {
            let config = cfg.resolve()?;
            let spec = config.network_spec(config.data.input_dim)?;
            let plans = match kind {
                DestructKind::DeleteOne if level != 1 => {
                    return Err(ConfigError("--kind delete-one takes --level 1".into()).into())
                }
                DestructKind::DeleteOne | DestructKind::DeleteK => {
                    enumerate_deletions(&spec, level)?
                }
                DestructKind::Permute => enumerate_permutations(&spec, level)?,
            };
            print!("{}", plans_to_jsonl(&plans));
        }
        Command::Config { cfg } => print!("{}", cfg.resolve()?.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
