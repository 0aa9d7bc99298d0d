use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tsgt::config::RunConfig;
use tsgt::pipeline::{self, Run, WindowSelection};
use tsgt::{Error, Result};

/// Digit-tokenizing transformer forecaster: training, simulation and
/// rolling-window evaluation.
#[derive(Parser, Debug)]
#[command(name = "tsgt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model per rolling window (resumes from existing checkpoints).
    Train(Common),
    /// Simulate forecast ensembles from the trained checkpoints.
    Forecast(Common),
    /// Compute error and quantile metrics with IQM and bootstrap intervals.
    Evaluate(Common),
    /// Run the Kupiec backtest over the windows.
    Backtest(Common),
    /// Print the combined metric and backtest report.
    Report(Common),
    /// Write the configured synthetic dataset as CSV.
    Synth(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override the global seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Windows processed concurrently.
    #[arg(long, value_name = "N", default_value_t = 1)]
    jobs: usize,
    /// Window subset, e.g. `3`, `0..10`, `2-5` or `0,4,8`.
    #[arg(long, value_name = "RANGE")]
    windows: Option<String>,
    /// Permute each inference context before simulating.
    #[arg(long)]
    shuffle_context: bool,
    /// Comma-separated quantile levels, e.g. `0.5,0.75,0.95`.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    /// Kupiec significance threshold.
    #[arg(long, value_name = "G")]
    gamma: Option<f64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::from_file(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.shuffle_context {
            cfg.ablation.shuffle_context = true;
        }
        if let Some(levels) = &self.levels {
            cfg.evaluation.levels = levels.clone();
        }
        if let Some(gamma) = self.gamma {
            cfg.evaluation.gamma = gamma;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn run(&self) -> Result<Run> {
        if self.jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        let selection = self.windows.as_deref().map(WindowSelection::parse).transpose()?;
        Run::new(self.config()?, selection.as_ref(), self.jobs)
    }
}

fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Train(c) => {
            let run = c.run()?;
            let s = pipeline::cmd_train(&run)?;
            println!("trained {} window(s), {} already current", s.done.len(), s.skipped.len());
        }
        Command::Forecast(c) => {
            let run = c.run()?;
            let s = pipeline::cmd_forecast(&run)?;
            println!("forecast {} window(s) into {}", s.done.len(), run.out().join("forecasts").display());
        }
        Command::Evaluate(c) => {
            let run = c.run()?;
            print!("{}", pipeline::cmd_evaluate(&run)?.to_table());
        }
        Command::Backtest(c) => {
            let run = c.run()?;
            let (_, summary) = pipeline::cmd_backtest(&run)?;
            for row in summary {
                println!("level {:<5} pass fraction {:.4} over {} windows", row.level, row.pass_fraction, row.windows);
            }
        }
        Command::Report(c) => {
            let run = c.run()?;
            print!("{}", pipeline::cmd_report(&run)?);
        }
        Command::Synth(c) => {
            let path = pipeline::cmd_synth(&c.config()?)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
