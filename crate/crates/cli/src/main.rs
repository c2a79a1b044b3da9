use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use hybridsim_cli::config::Mode;
use hybridsim_cli::run::{run, RunArgs};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    HmeDiscrete,
    HmeGrid,
    UnravelJump,
    UnravelDiffusive,
    UnravelMonitored,
    Validate,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::HmeDiscrete => Mode::HmeDiscrete,
            ModeArg::HmeGrid => Mode::HmeGrid,
            ModeArg::UnravelJump => Mode::UnravelJump,
            ModeArg::UnravelDiffusive => Mode::UnravelDiffusive,
            ModeArg::UnravelMonitored => Mode::UnravelMonitored,
            ModeArg::Validate => Mode::Validate,
        }
    }
}

/// Hybrid quantum-classical master equations and their unravelings.
///
/// Exit codes: 0 success, 2 invalid configuration or inadmissible model,
/// 3 numerical failure, 4 I/O error. HYBRIDSIM_THREADS caps worker threads.
#[derive(Debug, Parser)]
#[command(name = "hybridsim", version)]
struct Cli {
    mode: ModeArg,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides numerics.master_seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run even when the model fails the admissibility checks.
    #[arg(long)]
    allow_inadmissible: bool,
    /// Output directory (default: output.directory, else ./hybridsim-out).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let args = RunArgs {
        mode: cli.mode.into(),
        config: cli.config,
        seed: cli.seed,
        allow_inadmissible: cli.allow_inadmissible,
        out: cli.out,
    };
    match run(&args) {
        Ok(outcome) => {
            println!("{}", outcome.out_dir.display());
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("hybridsim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
