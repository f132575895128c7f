mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Compile, train and evaluate probabilistic circuits.
#[derive(Debug, Parser)]
#[command(name = "pcirc", version)]
struct Cli {
    /// Worker threads; defaults to the available hardware parallelism.
    #[arg(long, global = true, env = "PCIRC_THREADS")]
    threads: Option<usize>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct CompileArgs {
    /// Block size used for both sums and children.
    #[arg(long, default_value_t = 32)]
    pub block_size: usize,
    /// Maximum number of kernel groups per layer.
    #[arg(long, default_value_t = 8)]
    pub groups: usize,
    /// Allowed padding overhead of the group partition.
    #[arg(long, default_value_t = 0.25)]
    pub tol: f64,
    /// Compiled cache to reuse when it matches the model, or to create.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmArg {
    Full,
    Mini,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Nll,
    Bpd,
    Ppl,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a circuit from a key=value structure config.
    Build {
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Compile a model, print the layer and group layout and save the cache.
    Compile {
        model: PathBuf,
        #[command(flatten)]
        compile: CompileArgs,
        /// Where to write the compiled cache.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Fit parameters with EM.
    Train {
        model: PathBuf,
        data: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 512)]
        batch_size: usize,
        #[arg(long, value_enum, default_value_t = EmArg::Full)]
        em: EmArg,
        /// Step size of mini-batch EM.
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 1e-6)]
        pseudocount: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        compile: CompileArgs,
    },
    /// Print a likelihood metric of a dataset.
    Eval {
        model: PathBuf,
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = MetricArg::Nll)]
        metric: MetricArg,
        #[arg(long, default_value_t = 1024)]
        batch_size: usize,
        #[command(flatten)]
        compile: CompileArgs,
    },
    /// Draw samples from a model into a CSV or binary (.bin) dataset.
    Sample {
        model: PathBuf,
        #[arg(short, long, default_value_t = 1000)]
        num_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Time forward and backward passes across block sizes.
    Bench {
        model: PathBuf,
        /// Dataset to run on; samples from the model when omitted.
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        batch_size: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 4, 8, 16, 32, 64])]
        block_sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Samples drawn when no dataset is given.
        #[arg(long, default_value_t = 1024)]
        samples: usize,
        #[arg(long, default_value_t = 8)]
        groups: usize,
        #[arg(long, default_value_t = 0.25)]
        tol: f64,
        /// Write the TSV report here instead of stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(t) = cli.threads {
        pcirc_core::par::init_threads(t);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Build { config, output } => commands::build(&config, &output),
        Command::Compile { model, compile, output } => commands::compile(&model, &compile, output.as_deref()),
        Command::Train { model, data, output, epochs, batch_size, em, alpha, pseudocount, seed, compile } => {
            let cfg = pcirc_core::train::TrainConfig {
                epochs,
                batch_size,
                mode: match em {
                    EmArg::Full => pcirc_core::train::EmMode::Full,
                    EmArg::Mini => pcirc_core::train::EmMode::Mini,
                },
                alpha,
                pseudocount,
                seed,
                ..Default::default()
            };
            commands::train(&model, &data, &output, &cfg, &compile)
        }
        Command::Eval { model, data, metric, batch_size, compile } => {
            commands::eval(&model, &data, metric, batch_size, &compile)
        }
        Command::Sample { model, num_samples, seed, output } => commands::sample(&model, num_samples, seed, &output),
        Command::Bench { model, data, batch_size, block_sizes, repeats, samples, groups, tol, output } => {
            let opts = commands::BenchOpts { batch_size, block_sizes, repeats, samples, groups, tol };
            commands::bench(&model, data.as_deref(), &opts, output.as_deref())
        }
    }
}
