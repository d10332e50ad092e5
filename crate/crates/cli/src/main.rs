use clap::{Parser, Subcommand};
use ngpt_cli::{
    run_ablate, run_eval, run_inspect, run_make_corpus, run_sample, run_train, CliError,
};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "ngpt-lab",
    about = "Train, evaluate and inspect the baseline GPT decoder and its normalized variant",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a flat dotted-key JSON config
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Repeatable key=value config override
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint's loss and perplexity on a data file
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sequence length (defaults to the training context; may exceed it)
        #[arg(long)]
        length: Option<usize>,
        #[arg(long, default_value_t = 8)]
        batches: usize,
        /// CSV file to append the result row to
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write diagnostic CSV reports for a checkpoint
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of cond,embed,scalings (default: all that apply)
        #[arg(long)]
        reports: Option<String>,
        /// Seed for the embedding pair subsample
        #[arg(long, default_value_t = 0)]
        stats_seed: u64,
    },
    /// Compare ablation-axis variants against a base config
    Ablate {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        axis: String,
        #[arg(long)]
        budget: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "ablate")]
        out: PathBuf,
    },
    /// Generate text from a checkpoint (demo sampler)
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long, default_value_t = 256)]
        length: usize,
        /// 0 for greedy decoding
        #[arg(long, default_value_t = 0.8)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a deterministic synthetic text corpus
    MakeCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2_000_000)]
        bytes: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, seed, out, overrides } => {
            run_train(&config, seed, &out, &overrides, false).map(|_| ())
        }
        Command::Eval { ckpt, data, length, batches, csv } => {
            let default_csv = ckpt.with_file_name("eval.csv");
            run_eval(&ckpt, &data, length, batches, Some(csv.as_deref().unwrap_or(&default_csv)))
                .map(|_| ())
        }
        Command::Inspect { ckpt, out, reports, stats_seed } => {
            run_inspect(&ckpt, &out, reports.as_deref(), stats_seed)
        }
        Command::Ablate { base, axis, budget, seed, out } => {
            run_ablate(&base, &axis, budget, seed, &out, false).map(|_| ())
        }
        Command::Sample { ckpt, prompt, length, temperature, seed } => {
            let text = run_sample(&ckpt, &prompt, length, temperature, seed)?;
            println!("{text}");
            Ok(())
        }
        Command::MakeCorpus { out, bytes, seed } => run_make_corpus(&out, bytes, seed),
    }
}

fn main() {
    ngpt_core::numerics::tune_allocator();
    let threads = std::env::var("NGPT_LAB_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .unwrap_or(1);
    ngpt_core::numerics::set_threads(threads);
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("{err}");
        std::process::exit(err.exit_code());
    }
}
