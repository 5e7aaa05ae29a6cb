use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use flexcable::scenario;
use flexcable::sim::SimMode;

#[derive(Parser)]
#[command(
    name = "flexcable",
    version,
    about = "Plan, simulate and identify elastic cables carried by quadrotors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Tracked,
    BoundaryDriven,
    ClosedLoop,
}

impl From<Mode> for SimMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Tracked => SimMode::Tracked,
            Mode::BoundaryDriven => SimMode::BoundaryDriven,
            Mode::ClosedLoop => SimMode::ClosedLoop,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Flatness-based plan of a scenario: CSV plus JSON residual summary.
    Plan {
        scenario: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Simulate one or more scenarios: log CSV plus JSON metrics.
    Simulate {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        /// Output CSV (one scenario) or directory (several).
        #[arg(short, long)]
        out: PathBuf,
        /// Tabulated plan to use as the reference (one scenario only).
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Override the scenario's mode.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Scenarios simulated in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Identify stiffnesses and damping from a marker CSV.
    Identify {
        data: PathBuf,
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Single shooting window over the whole record.
        #[arg(long)]
        paper_exact: bool,
    },
    /// Synthetic boundary-driven marker data.
    Synth {
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Also write exact velocity columns.
        #[arg(long)]
        velocities: bool,
    },
    /// Mean output errors of simulation logs, optionally next to a reference table.
    Report {
        logs: Vec<PathBuf>,
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> flexcable::Result<()> {
    match cli.command {
        Command::Plan { scenario, out } => {
            let s = scenario::cmd_plan(&scenario, &out)?;
            println!(
                "{}: {} samples, max residual {:.3e} N, depth {} (min {})",
                s.scenario, s.samples, s.max_residual, s.depth, s.min_depth
            );
        }
        Command::Simulate {
            scenarios,
            out,
            plan,
            mode,
            jobs,
        } => {
            let mode = mode.map(SimMode::from);
            let summaries = if scenarios.len() == 1 {
                vec![scenario::cmd_simulate(&scenarios[0], plan.as_deref(), mode, &out)?]
            } else {
                if plan.is_some() {
                    return Err(flexcable::Error::InvalidConfig("--plan takes a single scenario".into()));
                }
                scenario::cmd_simulate_many(&scenarios, mode, &out, jobs)?
            };
            for s in summaries {
                let errs: Vec<String> = s
                    .metrics
                    .iter()
                    .map(|m| format!("e{} {:.4} m", m.index, m.mean))
                    .collect();
                println!("{} ({:?}): {}", s.scenario, s.mode, errs.join(", "));
                if let Some(c) = &s.comparison {
                    let red: Vec<String> = c.reduction.iter().map(|r| format!("{r:.2}x")).collect();
                    println!("  closed loop reduces final-quarter errors by {}", red.join(", "));
                }
            }
        }
        Command::Identify {
            data,
            config,
            out,
            paper_exact,
        } => {
            let r = scenario::cmd_identify(&data, &config, &out, paper_exact)?;
            println!("k = {:?}, c = {:.5}", r.theta.k, r.theta.c);
            println!("mean per-coordinate error {:.4} m", r.mean_coordinate_error);
        }
        Command::Synth {
            config,
            out,
            velocities,
        } => {
            let rows = scenario::cmd_synth(&config, &out, velocities)?;
            println!("{rows} frames written to {}", out.display());
        }
        Command::Report { logs, table, out } => {
            print!("{}", scenario::cmd_report(&logs, table.as_deref(), out.as_deref())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(scenario::exit_code(&e) as u8)
        }
    }
}
