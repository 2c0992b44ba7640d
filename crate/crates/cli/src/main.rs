mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ConfigError, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "usekit",
    version,
    about = "Stateful user embeddings: data, training, state updates and evaluation"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// `key = value` config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true, action = clap::ArgAction::Append)]
    sets: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Threads for embedding and simulation; 1 is bit-reproducible.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus and its vocabulary.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
    },
    /// Train a model on a corpus.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// use, use-fbp, use-sup or use-clm
        #[arg(long)]
        objective: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Metrics CSV (default `<out>.metrics.csv`).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Directory for per-epoch checkpoints.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Embed every sequence of a corpus.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply one period of new behaviors to a state store.
    UpdateState {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        store: PathBuf,
        /// New behaviors per user, in corpus format.
        #[arg(long)]
        data: PathBuf,
        /// Vocabulary file (default `<data>.vocab`).
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value = "stateful")]
        strategy: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Static evaluation tasks.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Multi-period simulation comparing update strategies.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time each update strategy period by period.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        periods: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per future window and compare retrieval across input lengths.
    SweepW {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated future windows.
        #[arg(long)]
        w: Option<String>,
        /// Comma-separated retrieval input lengths.
        #[arg(long)]
        lengths: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the header fields of a user state record.
    InspectState {
        /// A `.uses` record.
        #[arg(long, conflicts_with_all = ["store", "user"])]
        state: Option<PathBuf>,
        #[arg(long, requires = "user")]
        store: Option<PathBuf>,
        #[arg(long, requires = "store")]
        user: Option<u64>,
    },
}

#[derive(Subcommand, Debug)]
enum EvalCommand {
    /// User retrieval MRR with hard negatives.
    Retrieval(EvalArgs),
    /// Future-behavior prediction AUC with a probe.
    Fbp(EvalArgs),
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Needed when `use` is among the embedders.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Comma-separated: use, tf, tfidf, random.
    #[arg(long)]
    embedders: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let g = &cli.global;
    if let Some(path) = &g.config {
        cfg.apply_file(path)?;
    }
    for s in &g.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| ConfigError::new(s.as_str(), "expected KEY=VALUE"))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    match &cli.command {
        Command::GenData { users, length, .. } => {
            if let Some(u) = users {
                cfg.users = *u;
            }
            if let Some(l) = length {
                cfg.length = *l;
            }
        }
        Command::Train { objective, epochs, .. } => {
            if let Some(o) = objective {
                cfg.set("objective", o)?;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
        }
        Command::Bench { periods: Some(p), .. } => cfg.schedule.periods = *p,
        Command::SweepW { w, lengths, .. } => {
            if let Some(w) = w {
                cfg.set("sweep_w", w)?;
            }
            if let Some(l) = lengths {
                cfg.set("sweep_lengths", l)?;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    log::info!("{}", cfg.provenance());
    match commands::run(cli.command, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.downcast_ref::<usekit::Error>() {
                Some(usekit::Error::Config { key, reason }) => {
                    eprintln!("error: invalid configuration `{key}`: {reason}")
                }
                _ => eprintln!("error: {e:#}"),
            }
            ExitCode::from(1)
        }
    }
}
