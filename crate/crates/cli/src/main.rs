use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use conv_commsynth::config::parse_scope;
use conv_commsynth::{cmd_plan, cmd_simulate, cmd_sweep, cmd_verify, Axis, Format, Report, RunConfig};

#[derive(Parser)]
#[command(name = "conv-commsynth", version, about = "Plan, verify and simulate distributed convolution schedules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form optimum, integer plan, processor grid and schedule.
    Plan(Common),
    /// Compare the plan against the exhaustive divisor oracle.
    Verify(Common),
    /// Run the schedule on simulated processors and check the cost identities.
    Simulate(Common),
    /// Re-plan for each value of M or P.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<u64>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    lower_bound: bool,
    #[arg(long, value_parser = |s: &str| parse_scope(s).ok_or("expected c-innermost or all"))]
    scope: Option<commsynth::optimizer::PermutationScope>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let text = std::fs::read_to_string(&self.config)
            .with_context(|| format!("reading {}", self.config.display()))?;
        let mut cfg = RunConfig::parse(&text).with_context(|| format!("in {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.strict |= self.strict;
        cfg.lower_bound |= self.lower_bound;
        if let Some(scope) = self.scope {
            cfg.scope = scope;
        }
        Ok(cfg)
    }
}

fn run(cli: &Cli) -> Result<(Report, Format)> {
    let (common, report): (&Common, fn(&RunConfig) -> Result<Report>) = match &cli.command {
        Command::Plan(c) => (c, cmd_plan),
        Command::Verify(c) => (c, cmd_verify),
        Command::Simulate(c) => (c, cmd_simulate),
        Command::Sweep { common, axis, values } => {
            return Ok((cmd_sweep(&common.load()?, *axis, values)?, common.format));
        }
    };
    Ok((report(&common.load()?)?, common.format))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok((report, format)) => {
            print!("{}", report.render(format));
            if report.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
