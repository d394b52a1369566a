use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use modfuse::pipeline::{self, counts_table, LoadedConfig, Overrides};
use modfuse::Error;

#[derive(Parser)]
#[command(name = "modfuse", version, about = "Dynamic multi-modal training on EHR sequences and radiographs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 is fully deterministic.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic cohort and its manifest.
    Generate(Common),
    /// Train the configured mode and keep the best validation checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on one split and regime.
    Eval(Common),
    /// Evaluate several checkpoints side by side.
    Compare(Common),
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => EXIT_DIVERGED,
        _ => EXIT_CONFIG,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn run(command: Command) -> Result<(), Error> {
    let (Command::Generate(common) | Command::Train(common) | Command::Eval(common) | Command::Compare(common)) =
        &command;
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot set up {n} threads: {e}")))?;
    }
    let overrides = Overrides {
        out_dir: common.out.clone(),
        seed: common.seed,
    };
    let cfg = LoadedConfig::from_file(&common.config, &overrides)?;
    match command {
        Command::Generate(_) => {
            let manifest = pipeline::cmd_generate(&cfg)?;
            print!("{}", counts_table(&manifest));
            println!("cohort written to {}", cfg.out_dir.display());
        }
        Command::Train(_) => {
            let s = pipeline::cmd_train(&cfg)?;
            let o = &s.outcome;
            println!(
                "trained {} iterations; best validation macro-AUROC {} at iteration {}",
                o.history.last().map_or(0, |r| r.iter),
                fmt_opt(o.best_val),
                o.best_iteration
            );
            if let Some(r) = &s.val_report {
                println!("validation ({}): all {}", r.regime, fmt_opt(r.macro_auroc.all));
            }
        }
        Command::Eval(_) => {
            let r = pipeline::cmd_eval(&cfg)?;
            println!(
                "{} regime, {} samples, {} skipped labels: all {} acute {} mixed {} chronic {}",
                r.regime,
                r.n_samples,
                r.n_skipped,
                fmt_opt(r.macro_auroc.all),
                fmt_opt(r.macro_auroc.acute),
                fmt_opt(r.macro_auroc.mixed),
                fmt_opt(r.macro_auroc.chronic)
            );
        }
        Command::Compare(_) => {
            let rows = pipeline::cmd_compare(&cfg)?;
            print!("{}", pipeline::comparison_csv(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
