use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use rlp_core::experiment::{exit_code, run, RunOptions};

/// Run a perceptron policy-gradient experiment from a TOML or JSON config.
#[derive(Parser, Debug)]
#[command(name = "rlp", version)]
struct Args {
    /// Experiment config file.
    config: PathBuf,
    /// Directory for CSV artifacts and manifest.json.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, env = "RLP_THREADS")]
    threads: Option<usize>,
    /// Added to every seed in the config.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(n) = args.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let opts = RunOptions {
        output_dir: args.output_dir,
        seed_offset: args.seed_offset,
    };
    match run(&args.config, &opts) {
        Ok(report) => {
            println!("{}", report.output_dir.join("manifest.json").display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
