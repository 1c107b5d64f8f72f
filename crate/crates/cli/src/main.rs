use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use propa_core::harness::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_inspect_tree, cmd_train, EvalRequest, RunConfig, ScorerSource, Strategy,
};
use propa_core::interleave::Variant;
use propa_core::PropaError;

/// Tree-search process rewards with interleaved GRPO and SFT.
#[derive(Parser)]
#[command(name = "propa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one field, e.g. `--set schedule.lr=0.5`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, PropaError> {
        match &self.config {
            Some(path) => RunConfig::load(path, &self.overrides),
            None => RunConfig::from_toml(&RunConfig::default().to_toml(), &self.overrides),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the interleaved pipeline and write checkpoints, metrics and trees.
    Train(ConfigArgs),
    /// Evaluate a policy checkpoint with one test-time strategy.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Policy checkpoint; `<output_dir>/policy_best.txt` by default.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// PRM checkpoint; `<output_dir>/prm.txt` by default.
        #[arg(long, conflicts_with = "oracle")]
        prm: Option<PathBuf>,
        /// Score chains by agreement with the teacher instead of a PRM.
        #[arg(long)]
        oracle: bool,
        /// greedy, best-n or mcts-prm; `inference.strategy` by default.
        #[arg(long)]
        strategy: Option<String>,
        /// Instance file; the configured test split by default.
        #[arg(long)]
        instances: Option<PathBuf>,
    },
    /// Train every variant and evaluate every strategy for each seed.
    Ablate(ConfigArgs),
    /// Write the train, validation and test instance files.
    GenData(ConfigArgs),
    /// Pretty-print a tree dump with recomputed Q and UCT values.
    InspectTree {
        #[command(flatten)]
        config: ConfigArgs,
        /// Tree dump; `<output_dir>/trees.txt` by default.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Print the default configuration.
    DefaultConfig,
}

fn run(cli: Cli) -> Result<(), PropaError> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.load()?;
            let s = cmd_train(&cfg)?;
            println!(
                "trained {} into {}: best epoch {} (val accuracy {:.4}), PRM mse {:.6}, {} files",
                cfg.grpo.variant.name(),
                s.output_dir.display(),
                s.best_epoch + 1,
                s.best_val_accuracy,
                s.prm_mse,
                s.files.len()
            );
        }
        Command::Eval {
            config,
            policy,
            prm,
            oracle,
            strategy,
            instances,
        } => {
            let cfg = config.load()?;
            let dir = cfg.run.output_dir.clone();
            let strategy = match strategy {
                Some(s) => Strategy::parse(&s)?,
                None => cfg.inference.strategy,
            };
            let scorer = if oracle {
                ScorerSource::Oracle
            } else {
                ScorerSource::Checkpoint(prm.unwrap_or_else(|| dir.join("prm.txt")))
            };
            let req = EvalRequest {
                policy: policy.unwrap_or_else(|| dir.join("policy_best.txt")),
                scorer,
                strategy,
                instances,
            };
            let s = cmd_eval(&cfg, &req)?;
            let seeds: Vec<String> = s.per_seed.iter().map(|a| format!("{a:.4}")).collect();
            println!(
                "{} accuracy {:.4} (seeds {}) -> {}",
                s.strategy.name(),
                s.mean_accuracy,
                seeds.join(" "),
                s.csv.display()
            );
        }
        Command::Ablate(args) => {
            let cfg = args.load()?;
            let ab = cmd_ablate(&cfg)?;
            println!("activation-only greedy {:.4}", ab.activation_mean());
            for v in Variant::ALL {
                let cells: Vec<String> = Strategy::ALL
                    .iter()
                    .map(|&s| format!("{} {:.4}", s.name(), ab.mean(v, s)))
                    .collect();
                println!("{:<13}{}", v.name(), cells.join("  "));
            }
            println!("rows -> {}", cfg.run.output_dir.join("ablation.csv").display());
        }
        Command::GenData(args) => {
            let cfg = args.load()?;
            for f in cmd_gen_data(&cfg)? {
                println!("{}", f.display());
            }
        }
        Command::InspectTree { config, dump } => {
            let cfg = config.load()?;
            let dump = dump.unwrap_or_else(|| cfg.run.output_dir.join("trees.txt"));
            print!("{}", cmd_inspect_tree(&cfg, &dump)?);
        }
        Command::DefaultConfig => print!("{}", RunConfig::default().to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                PropaError::Config { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
